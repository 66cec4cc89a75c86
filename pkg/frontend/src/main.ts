import { StudyApi } from "./api.js";
import { SessionController } from "./app.js";

function apiBase(): string {
  const param = new URLSearchParams(window.location.search).get("api");
  return (param ?? window.location.origin).replace(/\/$/, "");
}

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app root element");
}
const controller = new SessionController(new StudyApi(apiBase()), root,
                                         window.localStorage);
void controller.start();
