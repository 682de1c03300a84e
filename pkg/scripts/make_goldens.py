#!/usr/bin/env python3
"""Regenerate the committed artifacts under goldens/.

Run from the repository root after any intentional numeric change:

    python scripts/make_goldens.py

and review the diff before committing.  The files freeze byte-exact outputs
of seeded deterministic paths on one machine:

    forward_tiny.json    tiny-config forward pass on a fixed scene
    frame_tiny.svg       rendered explanation frame for that scene
    pipeline_frames.json CLI pipeline: synth -> train 5 epochs -> explain

Cross-machine byte stability is not promised (BLAS differences); see README.
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from golden_fixtures import (  # noqa: E402
    GOLDEN_DIR,
    run_pipeline,
    tiny_forward_bytes,
    tiny_svg_bytes,
)


def main() -> int:
    GOLDEN_DIR.mkdir(exist_ok=True)
    (GOLDEN_DIR / "forward_tiny.json").write_bytes(tiny_forward_bytes())
    (GOLDEN_DIR / "frame_tiny.svg").write_bytes(tiny_svg_bytes())
    with tempfile.TemporaryDirectory() as work:
        frames = run_pipeline(Path(work))
        (GOLDEN_DIR / "pipeline_frames.json").write_bytes(frames.read_bytes())
    for name in ("forward_tiny.json", "frame_tiny.svg", "pipeline_frames.json"):
        print(f"wrote goldens/{name}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
