"""Stop a run, save a checkpoint, resume it, and get the same result.

Run: python3 demos/04_checkpoint_resume.py

The per-iteration random draws come from (seed, iteration), so the saved
drawing and optimizer state are all a resumed run needs.
"""

import tempfile
from pathlib import Path

from styledraw import OptimizationConfig, load_checkpoint, resume, save_checkpoint, stub_encoders
from styledraw import synthesize_content_only
from styledraw.io_cli import Checkpoint, decode_optimizer_state, encode_optimizer_state

enc = stub_encoders()
cfg = OptimizationConfig(num_paths=8, iterations=12, canvas_size=32, seed=4)

full = synthesize_content_only("a lighthouse", cfg, enc)
head = synthesize_content_only("a lighthouse", cfg.with_(iterations=7), enc)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "checkpoint.json"
    save_checkpoint(Checkpoint(
        drawing=head.final_drawing, config=cfg, iteration=7,
        rng_state={"seed": cfg.seed, "next_iteration": 7}, prompt="a lighthouse",
        optimizer_state=encode_optimizer_state(head.optimizer_state),
        loss_history=tuple(head.loss_history),
    ), path)
    print("checkpoint size:", path.stat().st_size, "bytes")
    ck = load_checkpoint(path)

tail = resume(ck.prompt, None, ck.config, enc, ck.drawing, ck.rng_state["next_iteration"],
              decode_optimizer_state(ck.optimizer_state))
print("resumed iterations:", [h.iteration for h in tail.loss_history])
print("identical to uninterrupted run:",
      tail.final_drawing == full.final_drawing
      and list(ck.loss_history) + tail.loss_history == full.loss_history)
