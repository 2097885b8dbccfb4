"""Release gate: ten end-to-end checks, one printed verdict line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines
as they appear; each check also fails its test on any violated bound.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np

import test_autodiff
from oracles import dense_window_attention, naive_conv2d, tally_confusion
from unetformer import network, ops, tensor, trainer
from unetformer.attention import (GLTB, AttentionConfig,
                                  CrossWindowInteraction, WindowMHSA,
                                  window_partition, window_reverse)
from unetformer.checkpoint import load_checkpoint, load_model, save_checkpoint
from unetformer.config import run_config_from_dict
from unetformer.data import (SynthSpec, pad_and_tile, synth_generate, untile,
                             write_dataset)
from unetformer.losses import cross_entropy, dice_loss, total_loss
from unetformer.metrics import ConfusionMatrix
from unetformer.network import (ModelConfig, SkipFusion, build_model,
                                count_params, total_macs)
from unetformer.nn import init_model
from unetformer.optim import AdamW, cosine_lr
from unetformer.tensor import Tensor


def _verdict(num: int, problems: list[str], detail: str) -> None:
    status = "FAIL" if problems else "PASS"
    text = "; ".join(problems) if problems else detail
    print(f"[criterion {num:02d}] {status} - {text}")
    assert not problems, f"criterion {num}: {text}"


def test_criterion_01_parameter_count():
    start = time.perf_counter()
    total = count_params(ModelConfig.full(num_classes=8))
    elapsed = time.perf_counter() - start
    problems = []
    if not 11.7e6 * 0.90 <= total <= 11.7e6 * 1.10:
        problems.append(f"{total:,} parameters outside 11.7M +/- 10%")
    if elapsed >= 1.0:
        problems.append(f"took {elapsed:.2f}s, limit 1s")
    _verdict(1, problems, f"full preset K=8: {total:,} parameters "
                          f"in {elapsed * 1e3:.0f} ms")


def test_criterion_02_mac_estimate():
    cfg = ModelConfig.full(num_classes=8)
    start = time.perf_counter()
    at_512 = total_macs(cfg, (512, 512))
    at_1024 = total_macs(cfg, (1024, 1024))
    elapsed = time.perf_counter() - start
    ratio = at_1024 / at_512
    problems = []
    if not 11.7e9 * 0.85 <= at_512 <= 11.7e9 * 1.15:
        problems.append(f"{at_512 / 1e9:.3f} GMACs @512 outside 11.7G +/- 15%")
    if not 46.9e9 * 0.85 <= at_1024 <= 46.9e9 * 1.15:
        problems.append(f"{at_1024 / 1e9:.3f} GMACs @1024 outside 46.9G +/- 15%")
    if not 3.95 <= ratio <= 4.05:
        problems.append(f"1024/512 ratio {ratio:.4f} outside 4.00 +/- 0.05")
    if elapsed >= 1.0:
        problems.append(f"took {elapsed:.2f}s, limit 1s")
    _verdict(2, problems,
             f"{at_512 / 1e9:.3f} GMACs @512, {at_1024 / 1e9:.3f} GMACs "
             f"@1024, ratio {ratio:.4f}, {elapsed * 1e3:.0f} ms")


def test_criterion_03_gradient_suite():
    seeds = range(5)
    start = time.perf_counter()
    worst_op = test_autodiff.run_op_checks(seeds)
    worst_block = test_autodiff.run_block_checks(seeds)
    elapsed = time.perf_counter() - start
    worst = max(worst_op, worst_block)
    problems = []
    if worst >= 1e-4:
        problems.append(f"worst relative error {worst:.2e} >= 1e-4")
    if elapsed >= 120.0:
        problems.append(f"took {elapsed:.1f}s, limit 120s")
    _verdict(3, problems,
             f"{len(test_autodiff.OP_CHECKS)} ops and "
             f"{len(test_autodiff.BLOCK_CHECKS)} blocks x 5 seeds, worst "
             f"relative error {worst:.2e} in {elapsed:.1f}s")


def test_criterion_04_oracle_equivalence():
    start = time.perf_counter()
    problems = []
    rng = np.random.default_rng(42)

    conv_worst = 0.0
    for cin, cout, k, stride, pad, groups, h, w in (
            (3, 4, 3, (1, 1), (1, 1), 1, 9, 10),
            (4, 6, 3, (2, 2), (1, 1), 2, 8, 11),
            (5, 5, 5, (1, 1), (2, 2), 5, 7, 7)):
        x = Tensor(rng.normal(size=(2, cin, h, w)).astype(np.float32))
        wt = Tensor(rng.normal(size=(cout, cin // groups, k, k))
                    .astype(np.float32) * 0.2)
        b = Tensor(rng.normal(size=(cout,)).astype(np.float32))
        with tensor.no_grad():
            got = ops.conv2d(x, wt, b, stride=stride, padding=pad,
                             groups=groups).data
        want = naive_conv2d(x.data, wt.data, b.data, stride, pad, groups)
        conv_worst = max(conv_worst, float(np.abs(got - want).max()))
    if conv_worst >= 1e-6:
        problems.append(f"conv2d vs naive loops differs by {conv_worst:.2e}")

    mhsa = WindowMHSA(AttentionConfig(channels=8, window_size=4, num_heads=2))
    init_model(mhsa, 3)
    x = Tensor(rng.normal(size=(2, 8, 11, 10)).astype(np.float32))
    with tensor.no_grad():
        got = mhsa(x).data
    want = dense_window_attention(mhsa, x.data)
    mhsa_worst = float(np.abs(got - want).max())
    if mhsa_worst >= 1e-5:
        problems.append(f"window attention vs dense oracle differs "
                        f"by {mhsa_worst:.2e}")

    matrix = ConfusionMatrix(5)
    oracle = np.zeros((5, 5), dtype=np.int64)
    for _ in range(1000):
        pred = rng.integers(0, 5, size=(8, 8))
        ref = rng.integers(0, 5, size=(8, 8))
        ref[rng.random(size=(8, 8)) < 0.1] = 255
        matrix.update(pred, ref)
        oracle += tally_confusion(pred, ref, 5)
    if not np.array_equal(matrix.matrix, oracle):
        problems.append("confusion counts differ from the brute-force tally")
    diag = int(np.trace(oracle))
    total = int(oracle.sum())
    if matrix.scores()["oa"] != diag / total:
        problems.append("overall accuracy differs from the tallied ratio")
    for k in range(5):
        tp = int(oracle[k, k])
        fp = int(oracle[:, k].sum()) - tp
        fn = int(oracle[k, :].sum()) - tp
        if matrix.scores()[f"iou.class{k}"] != tp / (tp + fp + fn):
            problems.append(f"iou for class {k} differs from tallied counts")

    elapsed = time.perf_counter() - start
    if elapsed >= 60.0:
        problems.append(f"took {elapsed:.1f}s, limit 60s")
    _verdict(4, problems,
             f"conv diff {conv_worst:.1e}, attention diff {mhsa_worst:.1e}, "
             f"1000 confusion tallies exact, {elapsed:.1f}s")


def test_criterion_05_closed_forms():
    problems = []
    rng = np.random.default_rng(0)

    target = rng.integers(0, 5, size=(2, 6, 6))
    ce = cross_entropy(Tensor(np.zeros((2, 5, 6, 6), dtype=np.float32)),
                       target).item()
    if abs(ce - math.log(5)) >= 1e-6:
        problems.append(f"uniform CE {ce!r} != ln 5")

    two = rng.integers(0, 2, size=(1, 4, 4))
    dice = dice_loss(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)),
                     two).item()
    if abs(dice - 1.0 / 3.0) >= 1e-6:
        problems.append(f"uniform two-class dice {dice!r} != 1/3")

    logits = Tensor(rng.normal(size=(2, 5, 8, 8)).astype(np.float32))
    aux = Tensor(rng.normal(size=(2, 5, 8, 8)).astype(np.float32))
    _, report = total_loss(logits, aux, rng.integers(0, 5, size=(2, 8, 8)))
    if report.total != report.ce + report.dice + 0.4 * report.aux:
        problems.append("total != ce + dice + 0.4*aux")

    if cosine_lr(6e-4, 0, 100) != 6e-4:
        problems.append("cosine lr at step 0 != base lr")
    if cosine_lr(6e-4, 100, 100) != 0.0:
        problems.append("cosine lr at the last step != 0")

    _verdict(5, problems, "uniform CE = ln K, hand dice = 1/3, loss "
                          "identity exact, cosine endpoints exact")


def test_criterion_06_structural_identities(tmp_path):
    problems = []
    rng = np.random.default_rng(1)

    block = GLTB(AttentionConfig(channels=4, window_size=2, num_heads=2))
    init_model(block, 7)
    block.eval()
    for leaf in (block.attn.fuse_pw, block.mlp.fc2):
        leaf.weight.data[...] = 0.0
        leaf.bias.data[...] = 0.0
    x = Tensor(rng.normal(size=(2, 4, 4, 4)).astype(np.float32))
    with tensor.no_grad():
        if not np.array_equal(block(x).data, x.data):
            problems.append("zeroed projections do not make GLTB an identity")

    skip = Tensor(rng.uniform(0.5, 1.5, size=(1, 3, 4, 4)).astype(np.float32))
    up = Tensor(rng.uniform(0.5, 1.5, size=(1, 3, 4, 4)).astype(np.float32))
    fuse = SkipFusion()
    with tensor.no_grad():
        fuse.raw_alpha.data[...] = 200.0
        if not np.array_equal(fuse(skip, up).data, skip.data):
            problems.append("saturated blend (alpha=1) is not the skip input")
        fuse.raw_alpha.data[...] = -200.0
        if not np.array_equal(fuse(skip, up).data, up.data):
            problems.append("saturated blend (alpha=0) is not the upsampled input")

    maps = Tensor(rng.normal(size=(2, 3, 10, 13)).astype(np.float32))
    with tensor.no_grad():
        wins, grid = window_partition(maps, 4)
        back = window_reverse(wins, grid).data
    if not np.array_equal(back, maps.data):
        problems.append("window partition/reverse round trip not exact")

    image = rng.uniform(0, 1, size=(3, 70, 45)).astype(np.float32)
    tiles, tile_grid = pad_and_tile(image, None, 32)
    if not np.array_equal(untile([t for t, _ in tiles], tile_grid), image):
        problems.append("pad/tile/untile round trip not exact")

    cfg = ModelConfig.tiny(num_classes=3)
    model = build_model(cfg, 5)
    opt = AdamW(list(model.named_parameters()), lr=1e-3)
    logits, aux = model.forward_train(
        Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)).astype(np.float32)))
    loss, _ = total_loss(logits, aux, np.zeros((2, 32, 32), dtype=np.int64))
    opt.zero_grad()
    tensor.backward(loss)
    opt.step()
    from unetformer.checkpoint import model_config_meta
    meta = model_config_meta(cfg)
    meta.update(step=1, epoch=1, best_miou=0.0, seed=5)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(first, model, opt, meta)
    clone = build_model(cfg, 6)
    clone_opt = AdamW(list(clone.named_parameters()), lr=1e-3)
    load_checkpoint(first, clone, clone_opt)
    save_checkpoint(second, clone, clone_opt, meta)
    if first.read_bytes() != second.read_bytes():
        problems.append("checkpoint save/load/save is not byte-identical")

    _verdict(6, problems, "GLTB identity, blend endpoints, partition and "
                          "tile round trips, checkpoint round trip all exact")


def test_criterion_07_cross_window_reachability():
    mhsa = WindowMHSA(AttentionConfig(channels=4, window_size=4, num_heads=2))
    init_model(mhsa, 11)
    interaction = CrossWindowInteraction(4)
    rng = np.random.default_rng(9)
    base = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    bumped = base.copy()
    bumped[0, :, 1, 1] += 0.5   # interior pixel of the top-left window
    with tensor.no_grad():
        off_a = mhsa(Tensor(base)).data
        off_b = mhsa(Tensor(bumped)).data
        on_a = interaction(mhsa(Tensor(base))).data
        on_b = interaction(mhsa(Tensor(bumped))).data
    problems = []
    if np.array_equal(off_a[:, :, :4, :4], off_b[:, :, :4, :4]):
        problems.append("perturbation invisible even inside its own window")
    if not np.array_equal(off_a[:, :, 4:, :], off_b[:, :, 4:, :]) or \
            not np.array_equal(off_a[:, :, :4, 4:], off_b[:, :, :4, 4:]):
        problems.append("interaction OFF still leaks across windows")
    if np.array_equal(on_a[:, :, 4:, :4], on_b[:, :, 4:, :4]):
        problems.append("interaction ON does not reach the window below")
    if np.array_equal(on_a[:, :, :4, 4:], on_b[:, :, :4, 4:]):
        problems.append("interaction ON does not reach the window beside")
    _verdict(7, problems, "adjacent windows change exactly when the "
                          "cross-window interaction is enabled")


def test_criterion_08_end_to_end_overfit(tmp_path):
    spec = SynthSpec(seed=0, count=8, size=64, noise_amplitude=4,
                     road_count=(1, 1), building_count=(1, 2),
                     tree_count=(1, 1), car_count=(1, 1))
    write_dataset(tmp_path / "ds", synth_generate(spec))
    cfg = run_config_from_dict({
        "model": {"width_preset": "tiny"},
        "optimizer": {"betas": [0.85, 0.95]},
        "schedule": {"epochs": 500, "batch_size": 8, "log_interval": 1},
        "data": {"root": str(tmp_path / "ds"), "augment": False},
        "seed": 0,
        "output_dir": str(tmp_path / "run"),
    })
    assert cfg.optimizer.lr == 6e-4
    start = time.perf_counter()
    summary = trainer.train(cfg)
    elapsed = time.perf_counter() - start

    log_lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in log_lines]
    losses = [r["loss"] for r in records if r["kind"] == "step"][:50]
    blocks = [sum(losses[i:i + 10]) / 10 for i in range(0, 50, 10)]

    problems = []
    if summary["steps"] > 500:
        problems.append(f"{summary['steps']} steps exceeds 500")
    if summary["final_train_miou"] < 0.95:
        problems.append(f"final train mIoU {summary['final_train_miou']:.4f} "
                        f"< 0.95")
    if not all(a > b for a, b in zip(blocks, blocks[1:])):
        problems.append(f"smoothed loss not strictly decreasing: "
                        f"{[round(b, 3) for b in blocks]}")
    if elapsed >= 900.0:
        problems.append(f"took {elapsed:.0f}s, limit 900s")
    _verdict(8, problems,
             f"train mIoU {summary['final_train_miou']:.4f} after "
             f"{summary['steps']} steps in {elapsed:.0f}s, smoothed loss "
             f"{[round(b, 2) for b in blocks]}")


def test_criterion_09_ablation_toggles():
    att = ModelConfig.tiny().attention
    counts = {}
    problems = []
    rng = np.random.default_rng(4)
    for cwi in (False, True):
        for frh in (False, True):
            cfg = ModelConfig(num_classes=3, width_preset="tiny",
                              attention=replace(att,
                                                cross_window_interaction=cwi),
                              use_frh=frh)
            model = build_model(cfg, 2)
            opt = AdamW(list(model.named_parameters()), lr=1e-3)
            x = Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32))
                       .astype(np.float32))
            try:
                logits, aux = model.forward_train(x)
                loss, _ = total_loss(logits, aux,
                                     np.zeros((2, 32, 32), dtype=np.int64))
                opt.zero_grad()
                tensor.backward(loss)
                opt.step()
            except Exception as e:   # noqa: BLE001 - report, don't crash
                problems.append(f"combo (interaction={cwi}, frh={frh}) "
                                f"failed a training step: {e}")
            counts[(cwi, frh)] = count_params(cfg)
    ordered = (counts[(False, False)] < counts[(True, False)]
               < counts[(False, True)] < counts[(True, True)])
    if not ordered:
        problems.append(f"parameter counts not strictly ordered: {counts}")
    _verdict(9, problems,
             f"4 flag combinations trained one step; parameter counts "
             f"{sorted(counts.values())} strictly ordered")


def test_criterion_10_run_determinism(tmp_path):
    raw = {
        "model": {"width_preset": "tiny"},
        "schedule": {"epochs": 2, "batch_size": 4, "log_interval": 1},
        "data": {"synth": {"count": 8, "size": 64}},
        "seed": 21,
    }
    for name in ("one", "two"):
        cfg = run_config_from_dict({**raw, "output_dir": str(tmp_path / name)})
        trainer.train(cfg)

    problems = []
    for artifact in ("train_log.jsonl", "last.ckpt", "best.ckpt"):
        a = (tmp_path / "one" / artifact).read_bytes()
        b = (tmp_path / "two" / artifact).read_bytes()
        if a != b:
            problems.append(f"{artifact} differs between identical runs")

    probe = Tensor(np.random.default_rng(3)
                   .uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32))
    outs = []
    for name in ("one", "two"):
        model, _ = load_model(tmp_path / name / "last.ckpt")
        model.eval()
        with tensor.no_grad():
            outs.append(model(probe).data)
    if not np.array_equal(outs[0], outs[1]):
        problems.append("final logits differ between identical runs")
    _verdict(10, problems, "logs, checkpoints, and final logits "
                           "bit-identical across two runs")
