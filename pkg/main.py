import argparse
import json
import logging
import sys

from modules.callable import main_ablate, main_eval, main_export, main_gen_data, main_train, setup_logging
from modules.config import DEFAULT_CONFIG, VARIANTS, load_settings
from modules.errors import TFoodError

EXIT_OK, EXIT_TFOOD, EXIT_USAGE, EXIT_OTHER = 0, 1, 2, 3

# command-specific flags -> section.key overrides
FLAG_KEYS = {
    "num_pairs": "corpus.num_pairs", "num_classes": "corpus.num_classes",
    "num_ingredient_words": "corpus.num_ingredient_words", "noise_level": "corpus.noise_level",
    "corpus_seed": "corpus.seed",
    "epochs": "train.epochs", "batch_size": "train.batch_size", "learning_rate": "train.learning_rate",
    "freeze_image_epochs": "train.freeze_image_epochs", "margin": "train.margin.kind",
    "lambda_sem": "train.lambda_sem", "lambda_itm": "train.lambda_itm", "seed": "train.seed",
    "bag_size": "eval.bag_size", "num_bags": "eval.num_bags", "eval_seed": "eval.seed",
}


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(value):
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def build_parser():
    parser = ArgumentParser(prog="tfood", description="Desk-scale cross-modal recipe/image retrieval")
    parser.add_argument("--config", default=DEFAULT_CONFIG, help="YAML configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any configuration field; repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic paired corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num-pairs", type=int)
    gen.add_argument("--num-classes", type=int)
    gen.add_argument("--num-ingredient-words", type=int)
    gen.add_argument("--noise-level", type=float)
    gen.add_argument("--seed", dest="corpus_seed", type=int)

    tr = sub.add_parser("train", help="train the dual encoders and MMR block")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--freeze-image-epochs", type=int)
    tr.add_argument("--margin", choices=["fixed", "inc", "ada"])
    tr.add_argument("--lambda-sem", type=float)
    tr.add_argument("--lambda-itm", type=float)
    tr.add_argument("--seed", type=int)

    ev = sub.add_parser("eval", help="retrieval metrics over random bags")
    ev.add_argument("--embeddings", help="embedding file written by export")
    ev.add_argument("--ckpt")
    ev.add_argument("--corpus")
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--report", default="report.csv", help=".csv, .json or .xlsx")
    ev.add_argument("--bag-size", type=int)
    ev.add_argument("--bag-sizes", type=_int_list, help="comma-separated sweep, e.g. 10,50,100")
    ev.add_argument("--num-bags", type=int)
    ev.add_argument("--rerank-top-k", type=int)
    ev.add_argument("--seed", dest="eval_seed", type=int)

    ex = sub.add_parser("export", help="write split embeddings to a binary file")
    ex.add_argument("--ckpt", required=True)
    ex.add_argument("--corpus", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--split", default="test", choices=["train", "val", "test"])

    ab = sub.add_parser("ablate", help="train and evaluate ablation variants")
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--variant", dest="variants", action="append", required=True,
                    help=f"repeatable; one of {', '.join(VARIANTS)}")
    ab.add_argument("--seeds", type=_int_list, default=[0])
    ab.add_argument("--epochs", type=int)
    return parser


def flag_overrides(args):
    items = []
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            items.append(f"{key}={json.dumps(value)}")
    return items


def run(args):
    settings = load_settings(args.config, list(args.overrides) + flag_overrides(args))
    if args.command == "gen-data":
        return {"paths": main_gen_data(settings, args.out)}
    if args.command == "train":
        return {"paths": main_train(settings, args.corpus, args.out, resume=args.resume)}
    if args.command == "eval":
        return main_eval(settings, args.report, embeddings=args.embeddings, ckpt_path=args.ckpt,
                         corpus_dir=args.corpus, split=args.split, bag_sizes=args.bag_sizes,
                         rerank_top_k=args.rerank_top_k)
    if args.command == "export":
        return {"path": main_export(args.ckpt, args.corpus, args.out, split=args.split)}
    return main_ablate(settings, args.corpus, args.out, args.variants, args.seeds)


def main(argv=None):
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        body, code = {"status": "success", "command": args.command, **run(args)}, EXIT_OK
    except UsageError as e:
        body, code = {"status": "error", "error": "UsageError", "message": str(e)}, EXIT_USAGE
    except TFoodError as e:
        logging.error(f"{type(e).__name__}: {e}", exc_info=True)
        body, code = {"status": "error", "error": type(e).__name__, "message": str(e)}, EXIT_TFOOD
    except Exception as e:
        logging.error(f"Unexpected failure: {e}", exc_info=True)
        body, code = {"status": "error", "error": type(e).__name__, "message": str(e)}, EXIT_OTHER
    print(json.dumps(body, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
