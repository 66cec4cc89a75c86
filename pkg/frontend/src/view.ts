// Pure DOM builders. One screen = the caption above two rows of five image
// tiles, in exactly the order the server sent them; clicking a tile selects
// it, a confirm button submits. Nothing here ever sees the target position.

import type { Screen } from "./api.js";

export interface ScreenHandlers {
  onConfirm(position: number): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderInstructions(root: HTMLElement, instructions: string,
                                   onStart: () => void): void {
  root.replaceChildren();
  const box = el("div", "panel instructions");
  box.append(el("h1", "", "Image selection study"));
  box.append(el("p", "", instructions));
  const next = el("button", "primary", "Show me an example");
  next.addEventListener("click", onStart);
  box.append(next);
  root.append(box);
}

export function renderExample(root: HTMLElement, onBegin: () => void): void {
  root.replaceChildren();
  const box = el("div", "panel example");
  box.append(el("h1", "", "Example"));
  box.append(el("p", "", "Each question looks like this: a caption above " +
    "ten images. Click the image the caption describes best, then press " +
    "Confirm. Here the caption “a dark square” matches the " +
    "highlighted tile."));
  const demo = el("div", "screen");
  demo.append(el("div", "caption", "a dark square"));
  const grid = el("div", "grid");
  for (let row = 0; row < 2; row++) {
    const rowEl = el("div", "grid-row");
    for (let col = 0; col < 5; col++) {
      const i = row * 5 + col;
      const tile = el("div", i === 3 ? "tile selected" : "tile");
      const swatch = el("div", "demo-swatch");
      swatch.style.background = i === 3 ? "#333" : `hsl(${i * 36}, 70%, 70%)`;
      swatch.style.borderRadius = i % 2 ? "50%" : "4px";
      tile.append(swatch);
      rowEl.append(tile);
    }
    grid.append(rowEl);
  }
  demo.append(grid);
  box.append(demo);
  const begin = el("button", "primary", "Start the study");
  begin.addEventListener("click", onBegin);
  box.append(begin);
  root.append(box);
}

export function renderScreen(root: HTMLElement, screen: Screen, total: number,
                             mediaUrl: (ref: string) => string,
                             handlers: ScreenHandlers): void {
  root.replaceChildren();
  const box = el("div", "panel screen");
  box.append(el("div", "progress",
                `Question ${screen.screen_index + 1} of ${total}`));
  box.append(el("div", "caption", screen.caption));

  let selected: number | null = null;
  const confirm = el("button", "primary confirm", "Confirm");
  confirm.disabled = true;

  const grid = el("div", "grid");
  const tiles: HTMLElement[] = [];
  // server order is authoritative: row 1 = positions 0..4, row 2 = 5..9
  for (let row = 0; row < 2; row++) {
    const rowEl = el("div", "grid-row");
    for (let col = 0; col < 5; col++) {
      const item = screen.items[row * 5 + col];
      if (!item) continue;
      const tile = el("div", "tile");
      tile.dataset.position = String(item.position);
      const img = el("img");
      img.src = mediaUrl(item.media_ref);
      img.alt = `image ${item.position + 1}`;
      tile.append(img);
      tile.addEventListener("click", () => {
        selected = item.position;
        tiles.forEach((t) => t.classList.remove("selected"));
        tile.classList.add("selected");
        confirm.disabled = false;
      });
      tiles.push(tile);
      rowEl.append(tile);
    }
    grid.append(rowEl);
  }
  box.append(grid);

  confirm.addEventListener("click", () => {
    if (selected === null) return;
    confirm.disabled = true;
    handlers.onConfirm(selected);
  });
  box.append(confirm);
  root.append(box);
}

export function renderFinish(root: HTMLElement, code: string): void {
  root.replaceChildren();
  const box = el("div", "panel finish");
  box.append(el("h1", "", "All done, thank you!"));
  box.append(el("p", "", "Your completion code:"));
  box.append(el("div", "finish-code", code));
  root.append(box);
}

export function renderError(root: HTMLElement, message: string,
                            onRetry: () => void): void {
  root.replaceChildren();
  const box = el("div", "panel error");
  box.append(el("h1", "", "Connection trouble"));
  box.append(el("p", "", message));
  const retry = el("button", "primary", "Retry");
  retry.addEventListener("click", onRetry);
  box.append(retry);
  root.append(box);
}
