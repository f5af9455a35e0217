# Overfit a single 4-frame sprite clip, then decode it back at temperature 0.
# Frames are written as PPM files under demo_out/overfit/.
import os

import numpy as np

from flowvid.data import CorpusSpec, export_frames, label_names, make_video
from flowvid.training import TrainConfig, Trainer
from flowvid.video import ModelConfig, VideoModel

out = os.path.join("demo_out", "overfit")
video = make_video(3, CorpusSpec(frames=4))
print("video 3:", label_names()[video.label], video.frames.shape)
export_frames(video, os.path.join(out, "target"))

model = VideoModel(ModelConfig(variant="state_label"))
print("parameters:", model.num_parameters())
trainer = Trainer(model, [video], TrainConfig(lr=3e-3, max_steps=200, checkpoint_interval=50),
                  out_dir=out, record_timing=False)
history = trainer.run()
for row in history[::40] + history[-1:]:
    print(f"step {row['step']:3d}  loss {row['loss_npd']:.3f} nats/dim  "
          f"head {row['loss_head_npd']:.3f}  tail {row['loss_tail_npd']:.3f}")

sample = model.generate(video.label, 4, temperature=0.0)
export_frames(sample, os.path.join(out, "sample"))
mae = np.abs(sample.frames.astype(float) - video.frames) / 255
print("per-frame MAE on [0,1]:", mae.mean(axis=(1, 2, 3)).round(4))

# the bright sprite pixels, frame by frame
for t in range(4):
    rows = ["".join("#" if px > 120 else "." for px in line) for line in sample.frames[t].max(axis=0)]
    print(f"t={t} {rows[0]}")
    for r in rows[1:]:
        print("    " + r)
