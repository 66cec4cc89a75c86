"""Build a synthetic study directory for frontend tests.

Usage: python3 build_fixture.py OUT_DIR

Creates OUT_DIR/trials.json (enough disjoint candidate sets for one full
105-screen block) and OUT_DIR/media/*.svg swatches for every referenced
item, ready for `discrilab serve --study OUT_DIR`.
"""

import pathlib
import sys

import numpy as np

from discrilab import study as st


def main(out_dir: str) -> None:
    out = pathlib.Path(out_dir)
    (out / "media").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)
    n_items = 1400
    embeddings = {i: rng.standard_normal(12) for i in range(n_items)}
    captions = {
        t: {i: f"{t} caption for item {i}" for i in range(n_items)}
        for t in ("human", "pretrained", "discritune")
    }
    pool = st.build_trials(embeddings, captions, n_targets=110, n_controls=16,
                           rng=rng)
    pool.save(out / "trials.json")
    referenced = {i for t in pool.trials + pool.controls
                  for i in (t.target_id, *t.distractor_ids)}
    for item_id in referenced:
        hue = (item_id * 47) % 360
        svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="120" height="120">'
               f'<rect width="120" height="120" fill="hsl({hue},60%,70%)"/>'
               f'<text x="60" y="66" text-anchor="middle" font-size="20">'
               f'{item_id}</text></svg>')
        (out / "media" / f"item_{item_id:05d}.svg").write_text(svg)
    print(f"fixture: {len(pool.trials)} trials, {len(pool.controls)} controls, "
          f"{len(referenced)} media files -> {out}")


if __name__ == "__main__":
    main(sys.argv[1])
