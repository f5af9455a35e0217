# The four conditioning variants on a small sprite corpus with a short budget.
# Numbers at this budget are noisy; the CLI's `ablate` command runs the full one.
import os

from flowvid.data import Corpus, CorpusSpec, generate_corpus
from flowvid.evaluation import run_ablation
from flowvid.glow import GlowConfig
from flowvid.training import TrainConfig

root = os.path.join("demo_out", "ablation")
generate_corpus(CorpusSpec(num_videos=200, frames=4, train_fraction=0.9), os.path.join(root, "data"))
corpus = Corpus(os.path.join(root, "data"))
print("corpus", corpus.hash, "train", len(corpus.ids("train")), "val", len(corpus.ids("val")))

small = {"glow": GlowConfig(flows_per_block=2, hidden=32).to_dict()}
reports = run_ablation(corpus, os.path.join(root, "runs"), steps=60, model_overrides=small,
                       train_config=TrainConfig(lr=1e-3, batch_size=8), record_timing=False)

print(f"{'variant':12s} {'ce_head':>8s} {'ce_tail':>8s}   (nats/dim, validation)")
for r in reports:
    print(f"{r.variant:12s} {r.ce_head_npd:8.4f} {r.ce_tail_npd:8.4f}")
by = {r.variant: r for r in reports}
print("state - prev_frame tail:", f"{by['state'].ce_tail_npd - by['prev_frame'].ce_tail_npd:+.4f}")
