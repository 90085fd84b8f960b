import logging
import os
from dataclasses import replace

import pandas as pd

from modules.checkpoint import load_checkpoint, params_from_checkpoint, read_embeddings, write_embeddings, write_table
from modules.config import apply_variant, model_config, settings_from_dict, settings_to_dict
from modules.corpus import Vocabulary, generate_corpus, load_corpus
from modules.errors import ConfigError, InputError
from modules.model import build_rerank_scorer, embed_pairs
from modules.retrieval import RECALL_KS, evaluate, report_frame
from modules.training import train

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


# ==============================
#  Logging Configuration
# ==============================
def setup_logging():
    level = os.environ.get("TFOOD_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


# ==============================
#  Helpers
# ==============================
def _check_corpus(settings, corpus):
    if corpus.spec.image_size != settings.image.image_size:
        raise ConfigError(
            f"corpus images are {corpus.spec.image_size}px but image.image_size is {settings.image.image_size}"
        )


def load_trained(ckpt_path):
    """(params, model config, vocabulary, settings) restored from a checkpoint."""
    checkpoint = load_checkpoint(ckpt_path)
    settings = settings_from_dict(checkpoint.config)
    words = checkpoint.extra.get("vocabulary")
    if not words:
        raise InputError(f"checkpoint {ckpt_path} carries no vocabulary")
    vocab = Vocabulary(list(words))
    return params_from_checkpoint(checkpoint), model_config(settings).with_vocab(len(vocab)), vocab, settings


def split_embeddings(params, cfg, vocab, corpus, split):
    recipes, images, pair_ids = corpus.samples(split, vocab, cfg.recipe)
    if not recipes:
        raise InputError(f"the {split} split of the corpus is empty")
    E_R, E_I = embed_pairs(params, cfg, recipes, images)
    return E_R, E_I, pair_ids, recipes, images


def write_report(frame, path, label):
    """Table at `path` plus a plain-text rendering next to it."""
    write_table(frame, path)
    text_path = os.path.splitext(path)[0] + ".txt"
    with open(text_path, "w") as f:
        f.write(frame.to_string(index=False) + "\n")
    logging.info(f"{label} report written to {path} and {text_path}")
    return {"table": path, "text": text_path}


# ==============================
#  Commands
# ==============================
def main_gen_data(settings, out_dir):
    return generate_corpus(settings.corpus, out_dir)


def main_train(settings, corpus_dir, out_dir, resume=None):
    corpus = load_corpus(corpus_dir)
    _check_corpus(settings, corpus)
    result = train(settings.train, model_config(settings), settings.eval, corpus, out_dir,
                   snapshot=settings_to_dict(settings), resume=resume)
    return result.paths


def main_export(ckpt_path, corpus_dir, out_path, split="test"):
    params, cfg, vocab, _ = load_trained(ckpt_path)
    corpus = load_corpus(corpus_dir)
    E_R, E_I, pair_ids, _, _ = split_embeddings(params, cfg, vocab, corpus, split)
    return write_embeddings(out_path, E_R, E_I, pair_ids)


def main_eval(settings, report_path, embeddings=None, ckpt_path=None, corpus_dir=None, split="test",
              bag_sizes=None, rerank_top_k=None):
    """
    Evaluate an embedding file, or a checkpoint on a corpus split. With a
    checkpoint and rerank_top_k, every bag size is reported twice: dual
    encoder ranks and ranks after MTD re-ranking of the top-k.
    """
    scorer = None
    if embeddings:
        if rerank_top_k:
            raise ConfigError("re-ranking needs --ckpt and --corpus, not an embedding file")
        E_R, E_I, _ = read_embeddings(embeddings)
    elif ckpt_path and corpus_dir:
        params, cfg, vocab, _ = load_trained(ckpt_path)
        E_R, E_I, _, recipes, images = split_embeddings(params, cfg, vocab, load_corpus(corpus_dir), split)
        if rerank_top_k:
            if not cfg.mmr.enabled:
                raise ConfigError("re-ranking needs a model trained with the MMR block")
            scorer = build_rerank_scorer(params, cfg, recipes, images)
    else:
        raise ConfigError("eval needs --embeddings, or --ckpt together with --corpus")

    reports = []
    for bag_size in bag_sizes or [settings.eval.bag_size]:
        cfg = replace(settings.eval, bag_size=bag_size, rerank_top_k=None)
        reports.extend(evaluate(E_R, E_I, cfg).values())
        if scorer is not None:
            if rerank_top_k > bag_size:
                logging.warning(f"Re-ranking top {bag_size} instead of {rerank_top_k}: bags hold {bag_size} pairs")
            cfg = replace(cfg, rerank_top_k=min(rerank_top_k, bag_size))
            reports.extend(evaluate(E_R, E_I, cfg, scorer).values())

    frame = report_frame(reports)
    paths = write_report(frame, report_path, "Evaluation")
    summary = frame[frame["bag"] == "mean"].drop(columns="bag").to_dict(orient="records")
    return {**paths, "summary": summary}


def main_ablate(settings, corpus_dir, out_dir, variants, seeds):
    """
    Train every variant for every seed on one corpus and evaluate the best
    checkpoint of each run on the test split.
    """
    corpus = load_corpus(corpus_dir)
    _check_corpus(settings, corpus)
    rows = []
    for variant in variants:
        for seed in seeds:
            run = apply_variant(settings, variant)
            run = replace(run, train=replace(run.train, seed=seed))
            run_dir = os.path.join(out_dir, variant.replace("=", "-"), f"seed{seed}")
            logging.info(f"Ablation run {variant} with seed {seed} in {run_dir}")
            paths = train(run.train, model_config(run), run.eval, corpus, run_dir,
                          snapshot=settings_to_dict(run)).paths
            ckpt = paths["best"] if os.path.exists(paths["best"]) else paths["last"]
            params, cfg, vocab, _ = load_trained(ckpt)
            E_R, E_I, _, _, _ = split_embeddings(params, cfg, vocab, corpus, "test")
            eval_cfg = replace(run.eval, bag_size=min(run.eval.bag_size, len(E_R)), rerank_top_k=None)
            for direction, report in evaluate(E_R, E_I, eval_cfg).items():
                rows.append({"variant": variant, "seed": str(seed), "direction": direction, "medR": report.medR,
                             **{f"R@{k}": report.recall_at[k] for k in RECALL_KS}})

    frame = pd.DataFrame(rows)
    means = frame.groupby(["variant", "direction"], sort=False)[["medR", *[f"R@{k}" for k in RECALL_KS]]].mean()
    means = means.reset_index().assign(seed="mean")
    frame = pd.concat([frame, means[frame.columns]], ignore_index=True)
    paths = write_report(frame, os.path.join(out_dir, "ablation.csv"), "Ablation")
    summary = means.to_dict(orient="records")
    return {**paths, "summary": summary}
