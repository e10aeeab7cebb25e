"""Command line pipeline: gen-data -> pretrain -> metatrain -> eval.

Exit codes: 0 success, 1 validation error, 2 runtime/divergence error.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import seeding
from .autodiff import NonFiniteError
from .checkpoint import Checkpoint, CheckpointError
from .config import Config, ConfigError, load_config
from .evaluation import EvalReport, evaluate_suite, paired_t_test
from .metalearn import EncodedEpisode, TextEncoder, meta_train
from .pretrain import DivergenceError, pretrain_run
from .tasks import DataFormatError, EpisodeError, fixed_test_episode, generate_synthetic, load_arsc_layout, read_corpus, write_layout
from .textmodel import Vocab, build_vocab, encode_batch, init_params

log = logging.getLogger("mtm")

PRETRAINED = "pretrained.ckpt"
METATRAINED = "metatrained.ckpt"


class ValidationError(ValueError):
    pass


def _claim(path: Path, force: bool):
    if path.exists() and not force:
        raise ValidationError(f"{path} exists; pass --force to overwrite")


def _write_trace(path: Path, trace):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for step, loss in trace:
            fh.write(f"{step}\t{loss!r}\n")


def _load_dataset(cfg: Config):
    root = Path(cfg.data_dir)
    if not root.is_dir():
        raise ValidationError(f"dataset directory {root} not found; run gen-data first")
    tasks, split = load_arsc_layout(root, cfg.resolved_test_domains())
    return root, tasks, split


def _dataset_vocab(cfg: Config, root: Path, tasks) -> Vocab:
    return build_vocab(read_corpus(root, tasks), cfg.min_count)


def _random_init(cfg: Config, vocab: Vocab):
    return init_params(len(vocab), cfg.embed_dim, cfg.hidden_dim, cfg.c_max, seeding.stream(cfg.seed, "init"))


# --------------------------------------------------------------------------
# commands


def command_gen_data(cfg: Config, force: bool = False) -> Path:
    syn = cfg.synthetic_config()
    root = Path(cfg.data_dir)
    if root.exists() and any(root.iterdir()) and not force:
        raise ValidationError(f"output directory {root} is not empty; pass --force to overwrite")
    data = generate_synthetic(syn)
    write_layout(data, root)
    log.info("wrote %d tasks (%d test) and %d corpus lines to %s", len(data.tasks), len(data.split.test), len(data.corpus), root)
    return root


def command_pretrain(cfg: Config, force: bool = False) -> Path:
    out = Path(cfg.out_dir)
    target = out / PRETRAINED
    for path in (target, out / "vocab.tsv", out / "pretrain_loss.tsv"):
        _claim(path, force)
    root, tasks, _ = _load_dataset(cfg)
    texts = read_corpus(root, tasks)
    vocab = build_vocab(texts, cfg.min_count)
    corpus = encode_batch(texts, vocab, cfg.max_len)
    params, trace = pretrain_run(corpus, _random_init(cfg, vocab), cfg.pretrain_config())
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.tsv")
    _write_trace(out / "pretrain_loss.tsv", trace)
    ckpt = Checkpoint.from_params(vocab, params, stage="pretrained", fingerprint=cfg.fingerprint(), iteration=cfg.pretrain_steps, seed=cfg.seed)
    ckpt.save(target)
    if trace:
        log.info("pretrained %d steps: loss %.4f -> %.4f", len(trace), trace[0][1], trace[-1][1])
    return target


def command_metatrain(cfg: Config, init: str = "random", force: bool = False) -> Path:
    out = Path(cfg.out_dir)
    target = out / METATRAINED
    for path in (target, out / "metatrain_loss.tsv"):
        _claim(path, force)
    root, tasks, split = _load_dataset(cfg)
    vocab = _dataset_vocab(cfg, root, tasks)
    if init == "random":
        theta0, init_id = _random_init(cfg, vocab), "random"
    else:
        ckpt = Checkpoint.load(init)
        dims = ckpt.params().dims
        want = {"vocab": len(vocab), "d": cfg.embed_dim, "h": cfg.hidden_dim, "c_max": cfg.c_max}
        if ckpt.vocab != vocab or dims != want:
            raise ValidationError(
                f"checkpoint {init} (fingerprint {ckpt.provenance.get('fingerprint')}, dims {dims}) "
                f"does not match config (fingerprint {cfg.fingerprint()}, dims {want})"
            )
        theta0, init_id = ckpt.params(), _sha(Path(init).read_bytes())
    train_tasks = [t for t in tasks if t.task_id in set(split.train)]
    state = meta_train(theta0, train_tasks, cfg.hyperparams(), vocab, cfg.max_len)
    out.mkdir(parents=True, exist_ok=True)
    _write_trace(out / "metatrain_loss.tsv", state.trace)
    Checkpoint.from_params(
        vocab,
        state.params,
        stage="meta-trained",
        fingerprint=cfg.fingerprint(),
        iteration=state.iteration,
        seed=cfg.seed,
        init=init_id,
    ).save(target)
    log.info("meta-trained %d iterations from %s init", state.iteration, "random" if init == "random" else "pretrained")
    return target


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def evaluate_checkpoint(cfg: Config, path, root: Path, tasks, split) -> EvalReport:
    ckpt = Checkpoint.load(path)
    vocab = _dataset_vocab(cfg, root, tasks)
    if ckpt.vocab != vocab:
        raise ValidationError(f"checkpoint {path} vocabulary does not match dataset {root}")
    encoder = TextEncoder(vocab, cfg.max_len)
    test = [t for t in tasks if t.task_id in set(split.test)]
    episodes: list[tuple[str, EncodedEpisode]] = [(t.domain, encoder.episode(fixed_test_episode(t, cfg.k_shot))) for t in test]
    alpha, steps = cfg.eval_settings
    header = {
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "alpha": alpha,
        "inner_steps": steps,
        "checkpoint": _sha(Path(path).read_bytes()),
        "stage": ckpt.provenance.get("stage", "?"),
    }
    return evaluate_suite(ckpt.params(), episodes, alpha, steps, header)


def command_eval(cfg: Config, models, baselines=(), force: bool = False):
    """Evaluate each model; with paired baselines also run the paired t-test.

    Returns ``(model_reports, baseline_reports, ttest_or_None)``.
    """
    models, baselines = list(models), list(baselines)
    if not models:
        raise ValidationError("eval needs at least one --model checkpoint")
    if baselines and len(baselines) != len(models):
        raise ValidationError(f"{len(models)} models but {len(baselines)} baselines; runs must be paired")
    if baselines and len(models) < 2:
        raise ValidationError("a paired t-test needs at least 2 paired runs")
    out = Path(cfg.out_dir)
    single = len(models) == 1 and not baselines
    names = ["eval_report.txt"] if single else [f"eval_model_{i:02d}.txt" for i in range(len(models))]
    names += [f"eval_baseline_{i:02d}.txt" for i in range(len(baselines))]
    if baselines:
        names.append("ttest.txt")
    for name in names:
        _claim(out / name, force)
    for path in models + baselines:
        if not Path(path).is_file():
            raise ValidationError(f"checkpoint {path} not found")
    root, tasks, split = _load_dataset(cfg)
    model_reports = [evaluate_checkpoint(cfg, p, root, tasks, split) for p in models]
    base_reports = [evaluate_checkpoint(cfg, p, root, tasks, split) for p in baselines]
    out.mkdir(parents=True, exist_ok=True)
    for name, rep in zip(names, model_reports + base_reports):
        (out / name).write_text(rep.to_text(), encoding="utf-8")
    ttest = None
    if baselines:
        a = [r.mean for r in model_reports]
        b = [r.mean for r in base_reports]
        ttest = paired_t_test(a, b)
        lines = [f"n\t{ttest.n}", f"t\t{ttest.t!r}", f"p\t{ttest.p!r}", f"degenerate\t{ttest.degenerate}"]
        lines += [f"model_mean\t{sum(a) / len(a)!r}", f"baseline_mean\t{sum(b) / len(b)!r}"]
        (out / "ttest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return model_reports, base_reports, ttest


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory (dataset dir for gen-data)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mtm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic ARSC-style dataset")
    sub.add_parser("pretrain", parents=[common], help="masked-token pretraining on the raw corpus")
    p = sub.add_parser("metatrain", parents=[common], help="MAML meta-training")
    p.add_argument("--init", default="random", help="'random' or a pretrained checkpoint path")
    p = sub.add_parser("eval", parents=[common], help="fixed-support evaluation on the test tasks")
    p.add_argument("--model", action="append", required=True, help="checkpoint to evaluate (repeatable)")
    p.add_argument("--baseline", action="append", default=[], help="paired baseline checkpoint (repeatable)")
    return parser


def _resolve_config(args) -> Config:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        key = "data_dir" if args.command == "gen-data" else "out_dir"
        overrides.append(f"{key}={_toml_str(args.out)}")
    return load_config(args.config, overrides)


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        if args.command == "gen-data":
            print(command_gen_data(cfg, args.force))
        elif args.command == "pretrain":
            print(command_pretrain(cfg, args.force))
        elif args.command == "metatrain":
            print(command_metatrain(cfg, args.init, args.force))
        else:
            reports, bases, ttest = command_eval(cfg, args.model, args.baseline, args.force)
            for path, rep in zip(args.model, reports):
                print(f"{path}\tmean\t{rep.mean:.4f}")
            for path, rep in zip(args.baseline, bases):
                print(f"{path}\tmean\t{rep.mean:.4f}")
            if ttest is not None:
                print(f"paired t-test: t={ttest.t:.4f} p={ttest.p:.3g} n={ttest.n}")
    except (DivergenceError, NonFiniteError) as exc:
        log.error("%s", exc)
        return 2
    except (ConfigError, ValidationError, DataFormatError, EpisodeError, CheckpointError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except RuntimeError as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
