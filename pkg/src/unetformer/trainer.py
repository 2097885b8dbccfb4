"""Training, evaluation, and inference loops."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import data, reporting, tensor
from .checkpoint import (load_checkpoint, load_encoder_weights,
                         model_config_meta, save_checkpoint)
from .config import RunConfig
from .errors import ConfigError, DataError, NumericError, ShapeError
from .losses import total_loss
from .metrics import ConfusionMatrix
from .network import UNetFormer, build_model
from .optim import AdamW, cosine_lr
from .tensor import Tensor


def _round_up(n: int, multiple: int) -> int:
    return -(-n // multiple) * multiple


def predict_logits(model: UNetFormer, image: np.ndarray,
                   tile: int | None = None, tta: bool = False) -> np.ndarray:
    """Class logits (K, H, W) for one (C, H, W) image of any size.

    The image is padded and cut into square tiles the network can accept
    (side a multiple of 32); per-tile logits are reassembled and cropped
    back to the input extent.
    """
    cin = model.cfg.input_channels
    if image.ndim != 3 or image.shape[0] != cin:
        raise ShapeError(f"expected ({cin}, H, W) image, got {image.shape}")
    _, h, w = image.shape
    if tile is None:
        tile = min(_round_up(max(h, w), 32), 512)
    if tile % 32 or tile < 32:
        raise ConfigError(f"tile size must be a positive multiple of 32, got {tile}")
    tiles, grid = data.pad_and_tile(image, None, tile)
    pieces = []
    for piece, _ in tiles:
        batch = piece[None].astype(np.float32)
        if tta:
            logits = data.tta_flip_infer(model, batch)[0]
        else:
            with tensor.no_grad():
                logits = model(Tensor(batch)).data[0]
        pieces.append(logits)
    return data.untile(pieces, grid)


def evaluate(model: UNetFormer, dataset, tile: int | None = None,
             tta: bool = False, include=None) -> tuple[dict[str, float],
                                                       ConfusionMatrix]:
    """Score a model over a dataset; returns (flat scores, confusion matrix).

    `include` restricts which classes enter the mean scores; per-class
    entries and the inclusion mask always cover every class.
    """
    k = model.cfg.num_classes
    names = getattr(dataset, "class_names", None)
    dataset_k = getattr(dataset, "num_classes", None)
    if dataset_k is not None and dataset_k != k:
        raise DataError(f"model predicts {k} classes but the dataset "
                        f"declares {dataset_k}")
    matrix = ConfusionMatrix(k, names if names and len(names) == k else None)
    was_training = model.training
    model.eval()
    try:
        for i in range(len(dataset)):
            image, mask = dataset[i]
            if mask is None:
                raise DataError(f"dataset item {i} has no reference mask")
            logits = predict_logits(model, image, tile, tta)
            matrix.update(logits.argmax(axis=0), mask)
    finally:
        if was_training:
            model.train()
    return matrix.scores(include), matrix


def _json_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(", ", ": "))


def make_dataset(cfg: RunConfig):
    """The training dataset a run config describes (disk or synthetic)."""
    if cfg.data.root is not None:
        return data.DiskDataset(cfg.data.root)
    seed = cfg.data.synth_seed if cfg.data.synth_seed is not None else cfg.seed
    spec = data.SynthSpec(seed=seed, count=cfg.data.synth_count,
                          size=cfg.data.synth_size,
                          noise_amplitude=cfg.data.noise_amplitude)
    return data.synth_generate(spec)


def train(cfg: RunConfig, out_dir=None, resume=None,
          encoder_weights=None) -> dict:
    """Run the full training loop; writes logs, checkpoints, and figures.

    Produces train_log.jsonl (one JSON object per step and per epoch, no
    timestamps), last.ckpt / best.ckpt (best by training mIoU), and
    training_curves.png under the output directory. Returns a summary dict.
    """
    cfg.validate()
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model, cfg.seed)
    optimizer = AdamW(list(model.named_parameters()), lr=cfg.optimizer.lr,
                      betas=cfg.optimizer.betas,
                      weight_decay=cfg.optimizer.weight_decay)
    if encoder_weights is not None:
        if resume is not None:
            raise ConfigError("cannot combine resumption with encoder weights")
        load_encoder_weights(encoder_weights, model)

    dataset = make_dataset(cfg)
    names = getattr(dataset, "class_names", None)
    if names is not None and len(names) != cfg.model.num_classes:
        raise DataError(f"dataset has {len(names)} classes but the model "
                        f"predicts {cfg.model.num_classes}")
    batch_size = cfg.schedule.batch_size
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total_steps = steps_per_epoch * cfg.schedule.epochs

    step = 0
    start_epoch = 0
    best_miou = -1.0
    if resume is not None:
        report = load_checkpoint(resume, model, optimizer)
        if report.meta.get("seed") != cfg.seed:
            raise ConfigError(f"resume checkpoint was trained with seed "
                              f"{report.meta.get('seed')}, config says {cfg.seed}")
        step = report.meta["step"]
        start_epoch = report.meta["epoch"]
        best_miou = report.meta.get("best_miou", -1.0)
        if start_epoch >= cfg.schedule.epochs:
            raise ConfigError(f"checkpoint already finished epoch "
                              f"{start_epoch}, config trains "
                              f"{cfg.schedule.epochs}")

    log_path = out_dir / "train_log.jsonl"
    history: list[dict] = []
    if resume is not None and log_path.exists():
        with log_path.open() as fh:
            history = [json.loads(line) for line in fh if line.strip()]
    log_file = log_path.open("a" if resume is not None else "w")

    def emit(obj: dict) -> None:
        history.append(obj)
        log_file.write(_json_line(obj) + "\n")
        log_file.flush()

    def checkpoint_meta(next_epoch: int) -> dict:
        meta = model_config_meta(cfg.model)
        meta.update(step=step, epoch=next_epoch, best_miou=max(best_miou, 0.0),
                    seed=cfg.seed)
        return meta

    try:
        for epoch in range(start_epoch, cfg.schedule.epochs):
            epoch_matrix = ConfusionMatrix(cfg.model.num_classes)
            model.train()
            for images, masks in data.batches(dataset, batch_size, cfg.seed,
                                              epoch, cfg.data.augment):
                lr = cosine_lr(cfg.optimizer.lr, step, total_steps)
                optimizer.lr = lr
                try:
                    logits, aux = model.forward_train(Tensor(images))
                    loss, report = total_loss(logits, aux, masks, cfg.loss)
                    optimizer.zero_grad()
                    tensor.backward(loss)
                except NumericError as e:
                    raise NumericError(f"non-finite value at step {step}: {e}") from e
                optimizer.step()
                epoch_matrix.update(logits.data.argmax(axis=1), masks)
                step += 1
                if step % cfg.schedule.log_interval == 0:
                    emit({"kind": "step", "step": step, "epoch": epoch,
                          "lr": lr, "loss": report.total, "ce": report.ce,
                          "dice": report.dice, "aux": report.aux})

            scores = epoch_matrix.scores()
            emit({"kind": "epoch", "epoch": epoch, "step": step,
                  "train_miou": scores["miou"], "train_oa": scores["oa"],
                  "train_mean_f1": scores["mean_f1"]})
            if scores["miou"] > best_miou:
                best_miou = scores["miou"]
                save_checkpoint(out_dir / "best.ckpt", model, optimizer,
                                checkpoint_meta(epoch + 1))
            save_checkpoint(out_dir / "last.ckpt", model, optimizer,
                            checkpoint_meta(epoch + 1))

        final_scores, _ = evaluate(model, dataset)
        emit({"kind": "final", "step": step,
              "train_miou": final_scores["miou"],
              "train_oa": final_scores["oa"],
              "train_mean_f1": final_scores["mean_f1"]})
    finally:
        log_file.close()

    reporting.training_curves(history, out_dir / "training_curves.png")
    return {"steps": step, "epochs": cfg.schedule.epochs,
            "best_train_miou": best_miou,
            "final_train_miou": final_scores["miou"],
            "final_train_oa": final_scores["oa"],
            "out_dir": str(out_dir)}
