"""
Training loop: batch-all ITC, semantic and ITM losses under the margin
schedule, the image-encoder freeze schedule, Adam updates, per-epoch
validation, and last/best checkpoints that make resumed runs bit-exact.
"""
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import yaml

from modules.checkpoint import load_checkpoint, params_from_checkpoint, plain, save_checkpoint, write_table
from modules.corpus import Vocabulary, build_vocabulary
from modules.errors import ConfigError, FormatError, InputError, NumericError
from modules.image_encoder import encode_images
from modules.losses import MarginPolicy, active_triplets, itc_loss, margin_at, semantic_loss, total_loss
from modules.mmr import itm_loss, itm_pairs, score_pairs, select_hard_negatives
from modules.model import IMAGE_PREFIX, embed_pairs, freeze, init_model, unfreeze
from modules.optim import Adam
from modules.recipe_encoder import encode_recipes
from modules.retrieval import evaluate
from modules.tensor import Tensor, zero_grad

METRIC_COLUMNS = [
    "epoch", "margin_r", "margin_v", "loss", "itc", "sem", "itm", "delta_r", "delta_v",
    "image_frozen", "val_medR", "val_R@1", "seconds",
]
STEP_COLUMNS = ["epoch", "step", "batch_size", "margin_r", "margin_v", "loss", "itc", "sem", "itm", "delta_r", "delta_v"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    freeze_image_epochs: int = 2
    margin: MarginPolicy = field(default_factory=MarginPolicy)
    semantic_margin: float = 0.3
    semantic_margin_follows_itc: bool = False
    lambda_sem: float = 0.1
    lambda_itm: float = 1.0
    labeled_fraction: float = 0.5
    adamine: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.margin, dict):
            object.__setattr__(self, "margin", MarginPolicy(**self.margin))
        if self.epochs < 0 or self.freeze_image_epochs < 0:
            raise ConfigError(f"epochs and freeze_image_epochs must be nonnegative, got {self.epochs}, {self.freeze_image_epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must lie in [0, 1], got {self.labeled_fraction}")
        if self.lambda_sem < 0 or self.lambda_itm < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class StepLosses:
    loss: Tensor
    itc: Tensor
    sem: Tensor
    itm: Tensor
    delta_r: int
    delta_v: int
    margin_r: float
    margin_v: float


@dataclass
class TrainResult:
    params: dict
    vocabulary: Vocabulary
    history: list
    steps: list
    paths: dict


# ==============================
#  One step
# ==============================
def label_batch(class_labels, fraction, rng):
    """Keep the class label of round(B * fraction) randomly chosen samples, None elsewhere."""
    batch = len(class_labels)
    keep = set(rng.choice(batch, int(round(batch * fraction)), replace=False).tolist())
    return [int(c) if i in keep else None for i, c in enumerate(class_labels)]


def step_margins(policy, epoch, E_R, E_I):
    if policy.kind != "ada":
        margin = margin_at(policy, epoch)
        return margin, margin
    # ada: delta is measured at margin alpha before the real loss
    delta_r, delta_v = active_triplets(E_R.data, E_I.data, policy.alpha)
    return margin_at(policy, epoch, delta_r), margin_at(policy, epoch, delta_v)


def compute_losses(params, model_cfg, cfg, recipes, images, classes, epoch, rng=None):
    recipe_tokens, E_R = encode_recipes(params, recipes, model_cfg.recipe, rng)
    image_tokens, E_I = encode_images(params, images, model_cfg.image, rng)

    margin_r, margin_v = step_margins(cfg.margin, epoch, E_R, E_I)
    itc, stats = itc_loss(E_R, E_I, (margin_r, margin_v), adamine=cfg.adamine)
    sem_margin = margin_r if cfg.semantic_margin_follows_itc else cfg.semantic_margin
    sem = semantic_loss(E_R, E_I, classes, sem_margin, adamine=cfg.adamine)

    if model_cfg.mmr.enabled and cfg.lambda_itm > 0:
        positives, negatives = itm_pairs(*select_hard_negatives(E_R, E_I))
        pos = score_pairs(params, recipe_tokens, image_tokens, positives, model_cfg.mmr, rng)
        neg = score_pairs(params, recipe_tokens, image_tokens, negatives, model_cfg.mmr, rng)
        itm = itm_loss(pos, neg)
    else:
        itm = Tensor(0.0)

    loss = total_loss(itc, sem, itm, cfg.lambda_sem, cfg.lambda_itm)
    return StepLosses(loss, itc, sem, itm, stats.delta_r, stats.delta_v, margin_r, margin_v)


def write_nan_dump(path, epoch, step, losses, params):
    dump = {
        "epoch": epoch,
        "step": step,
        "losses": {name: float(getattr(losses, name).item()) for name in ("loss", "itc", "sem", "itm")},
        "margin": [losses.margin_r, losses.margin_v],
        "parameters": {
            name: {
                "max_abs": float(np.max(np.abs(p.data))),
                "grad_norm": None if p.grad is None else float(np.linalg.norm(p.grad)),
            }
            for name, p in params.items()
        },
    }
    with open(path, "w") as f:
        yaml.safe_dump(plain(dump), f, sort_keys=False)
    logging.error(f"Non-finite loss at epoch {epoch} step {step}; diagnostics written to {path}")
    return path


# ==============================
#  Validation
# ==============================
def validate(params, model_cfg, eval_cfg, recipes, images):
    """(medR, R@1) image-to-recipe on the validation split, NaN when it is too small."""
    if len(recipes) < 2:
        return float("nan"), float("nan")
    E_R, E_I = embed_pairs(params, model_cfg, recipes, images)
    cfg = replace(eval_cfg, bag_size=min(eval_cfg.bag_size, len(recipes)), rerank_top_k=None,
                  directions=("image_to_recipe",))
    report = evaluate(E_R, E_I, cfg)["image_to_recipe"]
    return report.medR, report.recall_at[1]


def _improves(row, best):
    if np.isnan(row["val_medR"]):
        return True
    if best is None or np.isnan(best["val_medR"]):
        return True
    return (row["val_medR"], -row["val_R@1"]) < (best["val_medR"], -best["val_R@1"])


def _epoch_batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[start:start + batch_size] for start in range(0, n, batch_size)]
    # a trailing batch of one has no negatives
    return [b for b in batches if len(b) >= 2]


# ==============================
#  Loop
# ==============================
def train(cfg, model_cfg, eval_cfg, corpus, out_dir, snapshot=None, resume=None):
    """
    Train on the corpus' train split and validate on its val split after
    every epoch. Writes last.ckpt, best.ckpt, metrics.csv, steps.csv and
    config.snapshot.yaml to out_dir. `resume` continues from a checkpoint's
    completed-epoch count with its optimizer moments and history.
    """
    os.makedirs(out_dir, exist_ok=True)
    snapshot = snapshot or {}
    paths = {
        "last": os.path.join(out_dir, "last.ckpt"),
        "best": os.path.join(out_dir, "best.ckpt"),
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "steps": os.path.join(out_dir, "steps.csv"),
        "snapshot": os.path.join(out_dir, "config.snapshot.yaml"),
    }
    with open(paths["snapshot"], "w") as f:
        yaml.safe_dump(plain(snapshot), f, sort_keys=False)

    train_rows = corpus.rows("train")
    vocab = build_vocabulary([corpus.recipes[i] for i in train_rows])
    model_cfg = model_cfg.with_vocab(len(vocab))
    recipes, images, _ = corpus.samples("train", vocab, model_cfg.recipe)
    val_recipes, val_images, _ = corpus.samples("val", vocab, model_cfg.recipe)
    if len(recipes) < 2:
        raise InputError(f"training needs at least 2 pairs, the train split has {len(recipes)}")
    if len(val_recipes) < 2:
        logging.warning(f"Validation split has {len(val_recipes)} pairs; the best checkpoint follows the last epoch")
    labels = [r.class_label for r in recipes]

    params = init_model(model_cfg, cfg.seed)
    optimizer = Adam(cfg.learning_rate)
    history, steps, best, start_epoch = [], [], None, 0
    if resume:
        checkpoint = load_checkpoint(resume)
        if sorted(checkpoint.params) != sorted(params):
            raise FormatError(f"checkpoint {resume} does not match the configured model's parameters")
        params = params_from_checkpoint(checkpoint)
        optimizer.load_state(checkpoint.optimizer)
        start_epoch = checkpoint.epoch
        history = list(checkpoint.extra.get("history", []))
        steps = list(checkpoint.extra.get("steps", []))
        best = checkpoint.extra.get("best")
        logging.info(f"Resuming from {resume} after {start_epoch} completed epochs")

    nan_path = os.path.join(out_dir, "nan_dump.yaml")
    for epoch in range(start_epoch, cfg.epochs):
        started = time.perf_counter()
        frozen = epoch < cfg.freeze_image_epochs
        (freeze if frozen else unfreeze)(params, IMAGE_PREFIX)

        epoch_steps = []
        for step, batch in enumerate(_epoch_batches(len(recipes), cfg.batch_size, cfg.seed, epoch)):
            rng = np.random.default_rng([cfg.seed, epoch, step])
            classes = label_batch([labels[i] for i in batch], cfg.labeled_fraction, rng)
            losses = compute_losses(
                params, model_cfg, cfg, [recipes[i] for i in batch], [images[i] for i in batch], classes, epoch, rng,
            )
            zero_grad(params.values())
            losses.loss.backward()
            if not np.isfinite(losses.loss.item()):
                write_nan_dump(nan_path, epoch, step, losses, params)
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}; see {nan_path}")
            optimizer.step(params)
            epoch_steps.append({
                "epoch": epoch, "step": step, "batch_size": len(batch),
                "margin_r": losses.margin_r, "margin_v": losses.margin_v,
                "loss": losses.loss.item(), "itc": losses.itc.item(), "sem": losses.sem.item(),
                "itm": losses.itm.item(), "delta_r": losses.delta_r, "delta_v": losses.delta_v,
            })
        steps.extend(epoch_steps)

        val_medR, val_r1 = validate(params, model_cfg, eval_cfg, val_recipes, val_images)
        frame = pd.DataFrame(epoch_steps)
        if cfg.margin.kind == "ada":
            margin_r, margin_v = float(frame["margin_r"].mean()), float(frame["margin_v"].mean())
        else:
            margin_r = margin_v = margin_at(cfg.margin, epoch)
        row = {
            "epoch": epoch, "margin_r": margin_r, "margin_v": margin_v,
            "loss": float(frame["loss"].mean()), "itc": float(frame["itc"].mean()),
            "sem": float(frame["sem"].mean()), "itm": float(frame["itm"].mean()),
            "delta_r": int(frame["delta_r"].sum()), "delta_v": int(frame["delta_v"].sum()),
            "image_frozen": frozen, "val_medR": val_medR, "val_R@1": val_r1,
            "seconds": round(time.perf_counter() - started, 3),
        }
        history.append(row)
        if row["delta_r"] == 0 and row["delta_v"] == 0:
            logging.warning(f"Epoch {epoch}: no active triplets in any batch")
        logging.info(
            f"Epoch {epoch}: loss {row['loss']:.4f} (itc {row['itc']:.4f}, sem {row['sem']:.4f}, itm {row['itm']:.4f}), "
            f"delta {row['delta_r']}/{row['delta_v']}, margin {margin_r:.3f}/{margin_v:.3f}, "
            f"val medR {val_medR:.2f}, R@1 {val_r1:.1f}{' [image frozen]' if frozen else ''}"
        )

        improved = _improves(row, best)
        if improved:
            best = {"epoch": epoch, "val_medR": val_medR, "val_R@1": val_r1}
        extra = {"vocabulary": vocab.words, "history": history, "steps": steps, "best": best}
        save_checkpoint(paths["last"], params, optimizer, epoch + 1, snapshot, extra)
        if improved:
            save_checkpoint(paths["best"], params, optimizer, epoch + 1, snapshot, extra)

    write_table(pd.DataFrame(history, columns=METRIC_COLUMNS), paths["metrics"])
    write_table(pd.DataFrame(steps, columns=STEP_COLUMNS), paths["steps"])
    return TrainResult(params, vocab, history, steps, paths)
