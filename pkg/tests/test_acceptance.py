"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s``; the same lines are
collected into an "acceptance criteria" section of the terminal summary.
"""

import contextlib
import csv
import json
import time

import numpy as np
import pytest

from flowvid import autodiff as ad
from flowvid import checkpoint as ckpt
from flowvid.autodiff import Tensor
from flowvid.cli import main
from flowvid.conditioning import ConditioningPyramid, LabelEmbedding
from flowvid.data import Corpus, CorpusSpec, generate_corpus, make_video
from flowvid.evaluation import run_ablation
from flowvid.flows import (ActNorm, Coupling, FlowStep, InvConv1x1, gaussian_log_density, split,
                           squeeze, unsplit, unsqueeze)
from flowvid.glow import Glow, GlowConfig
from flowvid.nn import Module
from flowvid.processor import ContextProcessor
from flowvid.training import Adam, TrainConfig, Trainer, compute_loss, model_entries
from flowvid.video import ModelConfig, VideoModel, dequantize

from conftest import ACCEPTANCE_LINES, grad_check, numerical_logdet, randomize


@contextlib.contextmanager
def criterion(number, title):
    """Record a PASS/FAIL line; the block may fill ``info["detail"]``."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).splitlines()[0][:200] if str(exc) else ""
        line = f"criterion {number} FAIL  {title}: {type(exc).__name__} {msg}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"criterion {number} PASS  {title}: {info['detail']} [{time.perf_counter() - t0:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)


def mark_initialized(module):
    for m in module.modules():
        if isinstance(m, ActNorm):
            m.initialized[0] = 1
    return module


# ----------------------------------------------------------------------- 1

def test_criterion_1_invertibility(rng):
    with criterion(1, "invertibility, float32, 100 inputs, max-abs < 1e-4") as info:
        assert ad.default_dtype() == np.float32
        n = 100
        errors = {}

        def check(name, fwd, inv, x):
            with ad.no_grad():
                back = inv(fwd(x))
            assert back.dtype == np.float32
            errors[name] = float(np.abs(back.data - x.data).max())

        x8 = Tensor(rng.normal(size=(n, 8, 4, 4)))
        ctx = Tensor(rng.normal(size=(n, 3, 4, 4)))

        act = ActNorm(8)
        act.forward(x8)
        randomize(act, rng, 0.3)
        check("actnorm", lambda x: act.forward(x)[0], act.inverse, x8)

        inv1 = InvConv1x1(8, rng=rng)
        randomize(inv1, rng, 0.1)
        check("inv1x1", lambda x: inv1.forward(x)[0], inv1.inverse, x8)

        for mode in ("additive", "affine"):
            cpl = Coupling(8, context_channels=3, hidden=32, mode=mode, rng=rng)
            randomize(cpl, rng, 0.05)
            check(f"coupling-{mode}", lambda x, c=cpl: c.forward(x, ctx)[0],
                  lambda y, c=cpl: c.inverse(y, ctx), x8)

        step = FlowStep(8, context_channels=3, hidden=32, mode="affine", rng=rng)
        step.actnorm.initialize(x8.data)
        randomize(step, rng, 0.05)
        check("flowstep", lambda x: step.forward(x, ctx)[0], lambda y: step.inverse(y, ctx), x8)
        check("squeeze", squeeze, unsqueeze, x8)
        check("split", split, lambda parts: unsplit(*parts), x8)

        # full desk-scale models (L=2, K=4, 3x16x16), with and without a 19-channel pyramid
        frames = Tensor(rng.random((n, 3, 16, 16)))
        for mode in ("additive", "affine"):
            for ctx_ch in (0, 19):
                glow = Glow(GlowConfig(coupling=mode), context_channels=ctx_ch, rng=rng)
                pyr = None
                if ctx_ch:
                    pyr = ConditioningPyramid(ctx_ch, 2, rng=rng).build(Tensor(rng.random((n, ctx_ch, 16, 16))))
                glow.encode(frames, pyr)
                randomize(glow, rng, 0.02)
                check(f"glow-{mode}-ctx{ctx_ch}", lambda x, g=glow, p=pyr: g.encode(x, p)[0],
                      lambda zs, g=glow, p=pyr: g.decode(zs, p), frames)

        worst_name = max(errors, key=errors.get)
        assert errors[worst_name] < 1e-4, errors
        info["detail"] = f"{len(errors)} layer/model types, worst {errors[worst_name]:.1e} ({worst_name})"


# ----------------------------------------------------------------------- 2

def _layer_logdet(fwd, x):
    with ad.no_grad():
        _, ld = fwd(Tensor(x))
    return float(np.broadcast_to(ld.data, (x.shape[0],))[0])


def _flat_forward(fwd):
    def f(x):
        with ad.no_grad():
            return fwd(Tensor(x))[0].data
    return f


def test_criterion_2_logdet_oracle(rng):
    with criterion(2, "analytic log-det vs brute-force Jacobian, dim <= 16, within 1e-4") as info:
        results = {}
        with ad.precision(np.float64):
            x = rng.normal(size=(1, 4, 2, 2))
            ctx = Tensor(rng.normal(size=(1, 2, 2, 2)))

            act = mark_initialized(ActNorm(4))
            randomize(act, rng, 0.5)
            inv1 = InvConv1x1(4, rng=rng)
            randomize(inv1, rng, 0.3)
            layers = {"actnorm": act.forward, "inv1x1": inv1.forward}
            for mode in ("additive", "affine"):
                cpl = Coupling(4, context_channels=2, hidden=6, mode=mode, rng=rng)
                randomize(cpl, rng, 0.5)
                layers[f"coupling-{mode}"] = lambda t, c=cpl: c.forward(t, ctx)
                step = mark_initialized(FlowStep(4, context_channels=2, hidden=6, mode=mode, rng=rng))
                randomize(step, rng, 0.3)
                layers[f"flowstep-{mode}"] = lambda t, s=step: s.forward(t, ctx)
            for name, fwd in layers.items():
                results[name] = abs(_layer_logdet(fwd, x) - numerical_logdet(_flat_forward(fwd), x))

            results["squeeze"] = abs(numerical_logdet(lambda a: squeeze(Tensor(a)).data, x))

            # full multi-scale model on a 1x4x4 frame: 16 dims across two latents
            glow = mark_initialized(Glow(GlowConfig(channels=1, height=4, width=4, hidden=6,
                                                    flows_per_block=2, coupling="affine"), rng=rng))
            randomize(glow, rng, 0.3)
            x16 = rng.normal(size=(1, 1, 4, 4))

            def encode_flat(a):
                with ad.no_grad():
                    zs, _ = glow.encode(Tensor(a))
                return np.concatenate([z.data.reshape(-1) for z in zs])
            with ad.no_grad():
                _, ld = glow.encode(Tensor(x16))
            results["glow"] = abs(float(np.reshape(ld.data, -1)[0]) - numerical_logdet(encode_flat, x16))

        worst = max(results, key=results.get)
        assert results[worst] < 1e-4, results
        info["detail"] = f"{len(results)} layer/model types, worst |diff| {results[worst]:.1e} ({worst})"


# ----------------------------------------------------------------------- 3

def test_criterion_3_gradients(rng):
    with criterion(3, "tape vs central differences, float64, relative error < 1e-3") as info:
        errs = {}
        with ad.precision(np.float64):
            x = Tensor(rng.normal(size=(2, 4, 4, 4)))
            ctx = Tensor(rng.normal(size=(2, 2, 4, 4)))

            def objective(fwd):
                def loss():
                    y, ld = fwd()
                    return ad.sum(ad.square(y)) * 0.5 - ad.sum(ld * 1.0)
                return loss

            act = ActNorm(4)
            act.initialize(x.data)
            randomize(act, rng, 0.2)
            for name in ("log_scale", "bias"):
                errs[f"actnorm.{name}"] = grad_check(objective(lambda: act.forward(x)), getattr(act, name), rng)

            inv1 = InvConv1x1(4, rng=rng)
            randomize(inv1, rng, 0.2)
            errs["inv1x1.weight"] = grad_check(objective(lambda: inv1.forward(x)), inv1.weight, rng)

            for mode in ("additive", "affine"):
                cpl = Coupling(4, context_channels=2, hidden=6, mode=mode, rng=rng)
                randomize(cpl, rng, 0.3)
                for pname, p in cpl.named_parameters():
                    errs[f"coupling-{mode}.{pname}"] = grad_check(
                        objective(lambda c=cpl: c.forward(x, ctx)), p, rng)

            pyr = ConditioningPyramid(2, 3, rng=rng)
            glow = Glow(GlowConfig(channels=4, height=4, width=4, num_blocks=2, flows_per_block=1,
                                   hidden=6, coupling="affine"), context_channels=2, rng=rng)
            big_ctx = Tensor(rng.normal(size=(2, 2, 4, 4)))
            glow.encode(x, pyr.build(big_ctx)[:2])
            randomize(glow, rng, 0.1)

            def glow_loss():
                return ad.sum(glow.log_prob(x, pyr.build(big_ctx)[:2])) * -1.0
            errs["pyramid.conv"] = grad_check(glow_loss, pyr.convs[0].weight, rng)

            proc = ContextProcessor(state_channels=4, hidden=6, rng=rng)
            frames = [Tensor(rng.random((2, 3, 4, 4))) for _ in range(3)]
            proc.actnorm.initialize(np.concatenate([rng.normal(size=(2, 4, 4, 4)), frames[0].data], axis=1))
            randomize(proc, rng, 0.2)

            def proc_loss():
                state = proc.init_state(4, 4, batch=2)
                for f in frames:
                    state = proc.step(state, f)
                return ad.sum(ad.square(state.tensor))
            for pname, p in proc.named_parameters():
                errs[f"processor.{pname}"] = grad_check(proc_loss, p, rng)

            table = LabelEmbedding(3, (4, 4, 4), std=0.5, rng=rng)
            cpl = Coupling(4, context_channels=4, hidden=6, rng=rng)
            randomize(cpl, rng, 0.3)
            errs["embeddings.table"] = grad_check(
                objective(lambda: cpl.forward(x, table.lookup([1, 2]))), table.table, rng)

            # end to end: one parameter per group of a label-conditioned video model
            model = VideoModel(ModelConfig(glow=GlowConfig(height=4, width=4, flows_per_block=1, hidden=4,
                                                           coupling="affine"),
                                           variant="state_label", state_channels=2, label_count=3))
            px = rng.integers(0, 256, size=(2, 3, 3, 4, 4))
            model.initialize(dequantize(px), dequantize(px), np.array([0, 2]))
            randomize(model, rng, 0.05)

            def model_loss():
                return compute_loss(model, px, np.array([0, 2])).total
            params = dict(model.named_parameters())
            for name in ("head.blocks.0.steps.0.coupling.conv_in.weight",
                         "tail.blocks.1.steps.0.inv1x1.weight", "processor.conv_a.weight",
                         "embeddings.table", "pyramid.tail.convs.0.weight", "pyramid.head.convs.0.weight"):
                errs[f"video:{name}"] = grad_check(model_loss, params[name], rng)

        worst = max(errs, key=errs.get)
        assert errs[worst] < 1e-3, {k: v for k, v in errs.items() if v >= 1e-3}
        info["detail"] = f"{len(errs)} parameters, worst {errs[worst]:.1e} ({worst})"


# ----------------------------------------------------------------------- 4

class ToyFlow(Module):
    """Six affine flow steps on R^2, the two coordinates carried as channels of a 1x1 image."""

    def __init__(self, rng):
        self.steps = [FlowStep(2, hidden=32, mode="affine", rng=rng) for _ in range(6)]

    def log_prob(self, x):
        h, logdet = x, 0.0
        for step in self.steps:
            h, ld = step.forward(h)
            logdet = logdet + ld
        return gaussian_log_density(h) + logdet


def test_criterion_4_density_normalisation():
    with criterion(4, "2-D toy flow: grid mass over [-6,6]^2 in [0.98, 1.02]") as info:
        rng = np.random.default_rng(0)

        def ring(n):
            angle = rng.uniform(0.0, 2 * np.pi, n)
            radius = 2.0 + 0.25 * rng.normal(size=n)
            return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(n, 2, 1, 1)

        toy = ToyFlow(rng)
        with ad.no_grad():
            toy.log_prob(Tensor(ring(512)))
        opt = Adam(toy.named_parameters(), lr=5e-3)
        nll = []
        for _ in range(400):
            toy.zero_grad()
            loss = ad.sum(toy.log_prob(Tensor(ring(256)))) * (-1.0 / 256)
            ad.backward(loss)
            opt.step()
            nll.append(float(loss.data))

        axis = np.arange(-6.0, 6.0 + 1e-9, 0.05)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1).reshape(-1, 2, 1, 1)
        with ad.no_grad():
            lp = toy.log_prob(Tensor(grid)).data
        mass = float(np.sum(np.exp(lp)) * 0.05 ** 2)

        # the minimal instance: one randomly perturbed affine step
        single = FlowStep(2, hidden=8, mode="affine", rng=rng)
        single.actnorm.initialize(ring(256))
        randomize(single, rng, 0.2)
        with ad.no_grad():
            h, ld = single.forward(Tensor(grid))
            single_mass = float(np.sum(np.exp((gaussian_log_density(h) + ld).data)) * 0.05 ** 2)

        assert np.mean(nll[-20:]) < nll[0] - 0.5, "toy flow did not learn the ring"
        assert 0.98 <= mass <= 1.02, mass
        assert 0.98 <= single_mass <= 1.02, single_mass
        info["detail"] = (f"mass {mass:.5f} on a {len(axis)}x{len(axis)} grid after fitting a ring "
                          f"(NLL {nll[0]:.2f} -> {np.mean(nll[-20:]):.2f}); single step {single_mass:.5f}")


# ----------------------------------------------------------------------- 5

@pytest.mark.slow
def test_criterion_5_overfit_single_video(tmp_path):
    with criterion(5, "overfit one 4-frame 16x16 video: >= 50% reduction, T=0 MAE < 0.1") as info:
        video = make_video(3, CorpusSpec(frames=4))
        model = VideoModel(ModelConfig(variant="state_label", label_count=12))
        cfg = TrainConfig(lr=3e-3, batch_size=8, max_steps=200, checkpoint_interval=50, seed=0)
        trainer = Trainer(model, [video], cfg, str(tmp_path), record_timing=False)
        history = trainer.run()
        first, last = history[0]["loss_npd"], history[-1]["loss_npd"]
        reduction = 1.0 - last / first
        generated = model.generate(video.label, 4, temperature=0.0)
        mae = float(np.mean(np.abs(generated.frames.astype(np.float64) - video.frames) / 255.0))
        assert len(history) == 200 and trainer.rollbacks == 0
        assert reduction >= 0.5, (first, last)
        assert mae < 0.1, mae
        info["detail"] = f"loss {first:.3f} -> {last:.3f} nats/dim ({reduction:.0%} lower), MAE {mae:.4f}"


# ----------------------------------------------------------------------- 6

ABLATION_STEPS = 300
ABLATION_LR = 1e-3


@pytest.mark.slow
def test_criterion_6_ablation_ordering(tmp_path):
    title = f"ablation ({ABLATION_STEPS} steps, 1000 videos): trained CE < init CE, head and tail"
    with criterion(6, title) as info:
        spec = CorpusSpec(num_videos=1000)
        generate_corpus(spec, tmp_path / "data")
        corpus = Corpus(str(tmp_path / "data"))
        reports = run_ablation(corpus, str(tmp_path / "ablate"), ABLATION_STEPS,
                               train_config=TrainConfig(lr=ABLATION_LR), record_timing=False)
        by = {r.variant: r for r in reports}
        assert [r.variant for r in reports] == ["init", "prev_frame", "state", "state_label"]
        for v in ("prev_frame", "state", "state_label"):
            assert by[v].ce_head_npd < by["init"].ce_head_npd, (v, "head")
            assert by[v].ce_tail_npd < by["init"].ce_tail_npd, (v, "tail")
        findings = json.loads((tmp_path / "ablate" / "findings.json").read_text())
        diff = findings["state_minus_prev_frame_tail"]
        table = " ".join(f"{r.variant}={r.ce_head_npd:.3f}/{r.ce_tail_npd:.3f}" for r in reports)
        info["detail"] = (f"head/tail {table}; state-prev_frame tail {diff:+.4f} "
                          f"({'state better' if diff < 0 else 'prev_frame better'})")


# ----------------------------------------------------------------------- 7

def test_criterion_7_stability_mechanics():
    with criterion(7, "NaN injection: one bit-exact rollback; post-clip norm <= threshold every step") as info:
        videos = [make_video(i, CorpusSpec(frames=4)) for i in range(16)]
        clip = 0.02  # low enough that clipping engages on most steps
        cfg = TrainConfig(lr=1e-3, batch_size=4, clip=clip, checkpoint_interval=4, nan_at_batch=6, seed=2)
        trainer = Trainer(VideoModel(ModelConfig(variant="state_label")), videos, cfg, record_timing=False)
        trainer.initialize()
        trainer.checkpoint()
        snapshots = {}
        while trainer.step < 10:
            before = trainer.snapshot
            row = trainer.train_step()
            if row is None:
                restored = {**model_entries(trainer.model), **trainer.optimizer.state_entries()}
                _, saved = ckpt.decode(before)
                snapshots["ok"] = set(saved) == set(restored) and all(
                    np.array_equal(np.asarray(restored[k], dtype=np.float32), saved[k]) for k in saved)
                snapshots["moments"] = sum(k.startswith("optim.") for k in saved)
                snapshots["t"] = trainer.optimizer.t
        assert trainer.rollbacks == 1 and len(trainer.events) == 1
        assert snapshots["ok"] and snapshots["moments"] > 0 and snapshots["t"] == 4
        post = [r["grad_norm_postclip"] for r in trainer.history]
        pre = [r["grad_norm_preclip"] for r in trainer.history]
        # 10 kept steps plus the 2 rows later discarded by the rollback
        assert len(post) == 12 and all(p <= clip for p in post)
        engaged = sum(p > clip for p in pre)
        info["detail"] = (f"1 rollback to step {trainer.events[0]['restored_step']} (params + "
                          f"{snapshots['moments']} moment arrays bit-equal); post-clip <= {clip} on "
                          f"{len(post)}/{len(post)} steps, clipping engaged on {engaged}")


# ----------------------------------------------------------------------- 8

def test_criterion_8_label_embedding_diagnostics(tmp_path):
    with criterion(8, "state_label run logs a finite lemb_grad_norm every step, plottable from CSV") as info:
        assert main(["make-data", "--videos", "40", "--frames", "4", "--out", str(tmp_path / "d")]) == 0
        assert main(["train", "--data", str(tmp_path / "d"), "--variant", "state_label", "--max-steps", "25",
                     "--out", str(tmp_path / "run")]) == 0
        series = np.loadtxt(tmp_path / "run" / "lemb_grad_norm.csv", delimiter=",", skiprows=1)
        with open(tmp_path / "run" / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        column = np.array([float(r["lemb_grad_norm"]) for r in rows])
        assert series.shape == (25, 2) and np.array_equal(series[:, 0], np.arange(1, 26))
        assert np.all(np.isfinite(series[:, 1])) and np.array_equal(series[:, 1], column)
        # the head coupling output starts at zero, so no gradient reaches the labels on step 1
        assert series[0, 1] == 0.0 and np.all(series[1:, 1] > 0)
        info["detail"] = (f"25/25 steps finite, range [{series[:, 1].min():.2e}, {series[:, 1].max():.2e}]")


# ----------------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path):
    with criterion(9, "identical seeds give byte-identical checkpoints, metrics and samples") as info:
        data = tmp_path / "d"
        assert main(["make-data", "--videos", "24", "--frames", "3", "--seed", "5", "--out", str(data)]) == 0
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["train", "--data", str(data), "--variant", "state_label", "--max-steps", "6",
                         "--checkpoint-interval", "3", "--seed", "9", "--no-timing", "--out", str(out)]) == 0
            assert main(["sample", "--checkpoint", str(out / "model.nfvg"), "--label", "4", "--frames", "3",
                         "--seed", "11", "--out", str(out / "sample")]) == 0
            files = sorted(p for p in out.rglob("*") if p.is_file())
            blobs.append({str(p.relative_to(out)): p.read_bytes() for p in files})
        a, b = blobs
        assert a.keys() == b.keys()
        differing = [k for k in a if a[k] != b[k]]
        assert not differing, differing
        kinds = {"checkpoints": sum(k.endswith(".nfvg") for k in a),
                 "csv": sum(k.endswith(".csv") for k in a),
                 "sample files": sum(k.startswith("sample") for k in a)}
        assert kinds["checkpoints"] == 4 and kinds["csv"] == 2 and kinds["sample files"] == 4

        # with timing on, only wall_ms may differ
        for run in ("c", "e"):
            assert main(["train", "--data", str(data), "--variant", "state", "--max-steps", "3",
                         "--seed", "9", "--out", str(tmp_path / run)]) == 0
        rows = [list(csv.DictReader((tmp_path / r / "metrics.csv").open())) for r in ("c", "e")]
        strip = [[{k: v for k, v in row.items() if k != "wall_ms"} for row in rs] for rs in rows]
        assert strip[0] == strip[1]
        assert (tmp_path / "c" / "model.nfvg").read_bytes() == (tmp_path / "e" / "model.nfvg").read_bytes()
        info["detail"] = f"{len(a)} files identical ({kinds['checkpoints']} checkpoints, 2 CSVs, 4 sample files)"
