"""Command-line front end: gen, pretrain, train, finetune, detect, attack, eval, report.

Every run writes into a fresh ``--out`` directory, starting with
``resolved_config.json`` (all parameters after merging ``--config`` and the
command line, plus the package version).  Exit codes: 0 success, 2 config
error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    CorruptCheckpoint,
    DatasetManifest,
    DirectoryImages,
    IdConfusionError,
    InsufficientSamples,
    InvalidRange,
    ManifestError,
    ShapeMismatch,
    VersionMismatch,
)

log = logging.getLogger("idconfusion")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4


class ConfigInvalid(IdConfusionError, ValueError):
    pass


# -- argument plumbing ----------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _fraction(text) -> float:
    from .evasion import parse_fraction

    try:
        return parse_fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from None


def _flag(name: str) -> list:
    """Option strings for a field: the exact field name plus its dashed spelling."""
    opts = [f"--{name}"]
    if "_" in name:
        opts.append(f"--{name.replace('_', '-')}")
    return opts


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    from .idmodel.training import TrainConfig

    for f in fields(TrainConfig):
        kind = {"epochs": int, "batch_size": int, "lr_decay_epochs": int, "mask_refresh_epochs": int,
                "n_blocks": int, "block_size": int, "jpeg_copies": int,
                "optimizer": str}.get(f.name, float)
        if f.name in ("masking", "label_smoothing"):
            kind = _bool
        if f.name == "trainable_stages":
            p.add_argument(*_flag(f.name), dest=f.name, nargs="*", default=None)
            continue
        if f.name == "jpeg_quality":
            p.add_argument(*_flag(f.name), dest=f.name, nargs=2, type=int, default=None)
            continue
        p.add_argument(*_flag(f.name), dest=f.name, type=kind, default=None)


def _add_budget_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--norm_order", "--norm-order", dest="norm_order", choices=("inf", "2"), default=None)
    p.add_argument("--epsilon", "--budget-eps", dest="epsilon", type=_fraction, default=None,
                   help="perturbation budget, e.g. 4/255")
    p.add_argument("--iterations", "--iters", dest="iterations", type=int, default=None)
    p.add_argument("--step_size", "--step-size", dest="step_size", type=_fraction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idconfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON file of defaults; command-line flags win")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="fresh output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("gen", "generate a synthetic benchmark")
    p.add_argument("--ids", type=int, default=None)
    p.add_argument("--per-id-train", "--per_id_train", dest="per_id_train", type=int, default=None)
    p.add_argument("--real-test", "--n_real_test", dest="n_real_test", type=int, default=None)
    p.add_argument("--fake-test", "--n_fake_test", dest="n_fake_test", type=int, default=None)
    p.add_argument("--lambda", "--blend-range", dest="blend_range", nargs=2, type=float, default=None,
                   metavar=("LO", "HI"))
    p.add_argument("--mechanisms", nargs="+", default=None)

    p = command("pretrain", "pretrain (or fetch from cache) a toy identity extractor")
    p.add_argument("--extractor", default=None, help="zoo name, e.g. A")

    for name, text in (("train", "train a frozen-backbone identification model"),
                       ("finetune", "attention-based finetuning of an identification model")):
        p = command(name, text)
        p.add_argument("--data", default=None, help="benchmark directory")
        p.add_argument("--backbone", default=None, help="zoo extractor name or backbone checkpoint")
        if name == "finetune":
            p.add_argument("--init", default=None, help="trained identification model whose head starts the finetune")
        _add_train_flags(p)

    p = command("detect", "score images with a trained identification model")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None, choices=("train", "test", "all"))
    p.add_argument("--limit", type=int, default=None, help="score a seeded random subset of this size")
    p.add_argument("--threshold", default=None, help="number, or 'eer' to fit on the scored labels")
    p.add_argument("--metric", default=None, choices=("max", "neg_variance", "neg_entropy"))
    p.add_argument("--jpeg", type=int, default=None, help="re-encode images at this JPEG quality first")

    p = command("attack", "evasion attack against a detector and ASR measurement")
    p.add_argument("--model", default=None, help="detector checkpoint")
    p.add_argument("--data", default=None)
    p.add_argument("--objective", default=None, choices=("max_prob", "embed_distance", "ensemble_embed"))
    p.add_argument("--surrogate", default=None, help="identification checkpoint for max_prob")
    p.add_argument("--extractors", nargs="+", default=None, help="zoo names or backbone checkpoints")
    p.add_argument("--max-attacked", "--max_attacked", dest="max_attacked", type=int, default=None)
    p.add_argument("--sweep", nargs="+", type=_fraction, default=None,
                   help="budget sweep over these L-inf epsilons instead of a single attack")
    _add_budget_flags(p)

    p = command("eval", "AUC, EER and ROC from a score dump")
    p.add_argument("--scores", default=None)
    p.add_argument("--data", default=None, help="benchmark directory holding manifest.jsonl")

    p = command("report", "plots from earlier run directories")
    p.add_argument("--runs", nargs="+", default=None)
    return parser


DEFAULTS = {
    "gen": {"ids": 50, "per_id_train": 10, "n_real_test": 1000, "n_fake_test": 1000, "blend_range": [0.6, 0.9],
            "mechanisms": ["latent_blend", "masked_pixel_blend"]},
    "pretrain": {"extractor": "A"},
    "train": {"backbone": "A"},
    "finetune": {"backbone": "A"},
    "detect": {"split": "test", "metric": "max", "threshold": "eer"},
    "attack": {"objective": "ensemble_embed", "extractors": ["B", "C", "D"], "max_attacked": None},
    "eval": {},
    "report": {},
}
REQUIRED = {
    "train": ("data",), "finetune": ("data",), "detect": ("model", "data"), "attack": ("model", "data"),
    "eval": ("scores", "data"), "report": ("runs",),
}
GLOBAL_KEYS = ("config", "seed", "out", "verbose", "command")


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the --config file and explicit flags (in that order)."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigInvalid(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config file {args.config} is not JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigInvalid("config file must hold a JSON object")
        known = set(vars(args)) - {"config", "command", "verbose"}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys for {args.command}: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in ("config", "command", "verbose") or v is None:
            continue
        cfg[k] = v
    cfg.setdefault("seed", 0)
    if cfg.get("out") is None:
        raise ConfigInvalid("--out is required")
    for k in REQUIRED.get(args.command, ()):
        if cfg.get(k) is None:
            raise ConfigInvalid(f"--{k} is required for {args.command}")
    cfg["command"] = args.command
    cfg["version"] = __version__
    return cfg


def _fresh_dir(path) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigInvalid(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_config(cfg: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names and v is not None}


def _load_data(root):
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    return DatasetManifest.load(manifest_path), DirectoryImages(root)


def _load_generator_config(root) -> dict:
    path = Path(root) / "generator.json"
    return json.loads(path.read_text()) if path.is_file() else {}


# -- subcommands ----------------------------------------------------------------


def cmd_gen(cfg: dict, out: Path) -> dict:
    from .synthfaces import build_benchmark

    bm = build_benchmark(
        cfg["ids"], cfg["per_id_train"], cfg["n_real_test"], cfg["n_fake_test"], tuple(cfg["blend_range"]),
        tuple(cfg["mechanisms"]), cfg["seed"],
    )
    bm.save(out)
    n_fake = len(bm.manifest.select(is_fake=True))
    print(f"wrote {len(bm.manifest)} images ({n_fake} fake) and manifest.jsonl to {out}")
    return {"n_records": len(bm.manifest), "n_fake": n_fake}


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    from .idmodel.model import save_backbone
    from .zoo import ZOO, load_extractor

    name = cfg["extractor"]
    if name not in ZOO:
        raise ConfigInvalid(f"unknown extractor {name!r}; zoo has {sorted(ZOO)}")
    backbone = load_extractor(name, log=log.info)
    save_backbone(backbone, out / "backbone.idpf")
    print(f"extractor {name} saved to {out / 'backbone.idpf'}")
    return {"extractor": name}


def _train(cfg: dict, out: Path, finetune: bool) -> dict:
    from .idmodel.model import load_checkpoint, save_checkpoint
    from .idmodel.training import TrainConfig, finetune_attention, train_baseline
    from .zoo import load_extractor

    manifest, images = _load_data(cfg["data"])
    params = _split_config(cfg, TrainConfig)
    tc = TrainConfig.finetune(**params) if finetune else TrainConfig(**params)
    backbone = load_extractor(cfg["backbone"], log=log.info)
    stats = {}
    if finetune:
        init = load_checkpoint(cfg["init"]) if cfg.get("init") else None
        model = finetune_attention(manifest, backbone, tc, cfg["seed"], images=images, stats=stats, init=init)
    else:
        model = train_baseline(manifest, backbone, tc, cfg["seed"], images=images)
    save_checkpoint(model, out / "model.idpf")
    (out / "train_config.json").write_text(tc.to_json() + "\n")
    print(f"{'finetuned' if finetune else 'trained'} {model.identity_set.K}-way model -> {out / 'model.idpf'}")
    return {"K": model.identity_set.K, **({"snapshots": stats["snapshots"]} if "snapshots" in stats else {})}


def cmd_train(cfg, out):
    return _train(cfg, out, finetune=False)


def cmd_finetune(cfg, out):
    return _train(cfg, out, finetune=True)


def _select(manifest, split, limit, seed):
    records = list(manifest.records) if split == "all" else [r for r in manifest.records if r.split == split]
    if limit is not None and limit < len(records):
        idx = np.sort(np.random.default_rng(seed).choice(len(records), size=limit, replace=False))
        records = [records[i] for i in idx]
    if not records:
        raise ManifestError(f"no records in split {split!r}")
    return records


def cmd_detect(cfg: dict, out: Path) -> dict:
    from .detector import Detector, format_score_line
    from .evalkit.metrics import eer_from_scores
    from .evalkit.reports import write_scores
    from .evalkit.studies import jpeg_roundtrip
    from .idmodel.model import load_checkpoint

    model = load_checkpoint(cfg["model"])
    manifest, images = _load_data(cfg["data"])
    records = _select(manifest, cfg["split"], cfg.get("limit"), cfg["seed"])
    x = images.stack(records)
    if cfg.get("jpeg") is not None:
        x = np.stack([jpeg_roundtrip(im, cfg["jpeg"]) for im in x])
    values = Detector(model, cfg["metric"]).scores(x)
    thr = cfg["threshold"]
    if str(thr).lower() == "eer":
        fake = np.array([r.is_fake for r in records])
        from .evalkit.metrics import SingleClassOnly

        if fake.all() or not fake.any():
            raise SingleClassOnly("an 'eer' threshold needs real and fake records; pass --threshold")
        thr, _ = eer_from_scores(values[~fake], values[fake])
    else:
        try:
            thr = float(thr)
        except ValueError:
            raise ConfigInvalid(f"--threshold must be a number or 'eer', got {thr!r}") from None
    ids = [r.sample_id for r in records]
    for sid, v in zip(ids, values):
        print(format_score_line(sid, cfg["metric"], float(v), float(thr)))
    write_scores(out / "scores.csv", ids, cfg["metric"], values, thr)
    return {"n_scored": len(ids), "threshold": float(thr), "n_fake_verdicts": int((values < thr).sum())}


def _references(manifest, images, fake_records, seed):
    """One real image of each fake's source identity, drawn from the test split."""
    rng = np.random.default_rng(seed)
    pool = {}
    for r in manifest.records:
        if not r.is_fake and r.split == "test":
            pool.setdefault(r.identity, []).append(r)
    refs = []
    for f in fake_records:
        cands = pool.get(f.source_id)
        if not cands:
            raise ManifestError(f"no test real of source identity {f.source_id!r}")
        refs.append(images.load(cands[int(rng.integers(len(cands)))]))
    return np.stack(refs)


def cmd_attack(cfg: dict, out: Path) -> dict:
    from .detector import Detector
    from .evalkit.studies import budget_sweep
    from .evasion import AttackBudget, AttackObjective, measure_asr
    from .idmodel.model import load_checkpoint
    from .zoo import load_extractor

    detector = Detector(load_checkpoint(cfg["model"]))
    manifest, images = _load_data(cfg["data"])
    reals = manifest.select("test", is_fake=False)
    fakes = manifest.select("test", is_fake=True)
    if not reals or not fakes:
        raise ManifestError("attack needs test reals and test fakes")
    x_real, x_fake = images.stack(reals), images.stack(fakes)
    kind = cfg["objective"]
    if kind == "max_prob":
        if not cfg.get("surrogate"):
            raise ConfigInvalid("--surrogate is required for the max_prob objective")
        objective = AttackObjective(kind, surrogate=load_checkpoint(cfg["surrogate"]).double())
        refs = None
    else:
        extractors = [load_extractor(e, log=log.info).double() for e in cfg["extractors"]]
        if kind == "embed_distance" and len(extractors) != 1:
            raise ConfigInvalid("embed_distance takes exactly one extractor")
        objective = AttackObjective(kind, extractors=extractors)
        refs = _references(manifest, images, fakes, cfg["seed"])
    budget_kw = _split_config(cfg, AttackBudget)
    budget = AttackBudget(**budget_kw)
    cfg.update(budget.to_dict())
    if cfg.get("sweep"):
        rows = budget_sweep(detector, x_fake, x_real, objective, cfg["sweep"], refs, budget.iterations,
                            max_attacked=cfg.get("max_attacked"), seed=cfg["seed"])
        (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
        for row in rows:
            print(f"epsilon {row['epsilon']:.6f} ASR {row['asr']:.4f} (n={row['n_attacked']})")
        return {"sweep": rows}
    rep = measure_asr(detector, x_fake, x_real, objective, budget, refs, [r.sample_id for r in fakes],
                      cfg.get("max_attacked"), cfg["seed"])
    (out / "asr.json").write_text(rep.dumps() + "\n")
    print(f"budget norm={budget.norm_order} epsilon={budget.epsilon!r} iterations={budget.iterations} "
          f"step={budget.step_size!r}")
    print(f"ASR {rep.asr:.4f} ({rep.n_evaded}/{rep.n_attacked}) at threshold {rep.threshold:.6f}")
    return {"asr": rep.asr, "n_attacked": rep.n_attacked, "n_evaded": rep.n_evaded, "budget": rep.budget}


def cmd_eval(cfg: dict, out: Path) -> dict:
    from .evalkit.metrics import roc_report
    from .evalkit.reports import read_scores, write_roc_csv

    rows = read_scores(cfg["scores"])
    manifest, _ = _load_data(cfg["data"])
    by_id = {r.sample_id: r for r in manifest.records}
    missing = [r["sample_id"] for r in rows if r["sample_id"] not in by_id]
    if missing:
        raise ManifestError(f"{len(missing)} scored samples are not in the manifest, e.g. {missing[0]}")
    fake = np.array([by_id[r["sample_id"]].is_fake for r in rows])
    values = np.array([r["value"] for r in rows])
    rep = roc_report(values[~fake], values[fake])
    write_roc_csv(out / "roc.csv", rep)
    (out / "scores.csv").write_text(Path(cfg["scores"]).read_text())
    summary = rep.summary()
    print(json.dumps(summary, indent=2))
    return summary


def cmd_report(cfg: dict, out: Path) -> dict:
    from .evalkit.metrics import roc_report
    from .evalkit.reports import plot_asr, plot_budget_sweep, plot_roc, plot_score_hist, read_scores

    made = []
    curves, asr = {}, {}
    for run in cfg["runs"]:
        run = Path(run)
        if not run.is_dir():
            raise FileNotFoundError(f"run directory {run} not found")
        label = run.name
        resolved = run / "resolved_config.json"
        data_dir = json.loads(resolved.read_text()).get("data") if resolved.is_file() else None
        if (run / "scores.csv").is_file() and data_dir:
            rows = read_scores(run / "scores.csv")
            manifest, _ = _load_data(data_dir)
            by_id = {r.sample_id: r for r in manifest.records}
            fake = np.array([by_id[r["sample_id"]].is_fake for r in rows])
            values = np.array([r["value"] for r in rows])
            if fake.any() and not fake.all():
                curves[label] = roc_report(values[~fake], values[fake])
                plot_score_hist(values[~fake], values[fake], out / f"hist_{label}.png", rows[0]["threshold"])
                made.append(f"hist_{label}.png")
        if (run / "asr.json").is_file():
            asr[label] = json.loads((run / "asr.json").read_text())["asr"]
        if (run / "sweep.json").is_file():
            plot_budget_sweep(json.loads((run / "sweep.json").read_text()), out / f"sweep_{label}.png")
            made.append(f"sweep_{label}.png")
    if curves:
        plot_roc(curves, out / "roc.png")
        made.append("roc.png")
    if asr:
        plot_asr(asr, out / "asr.png")
        made.append("asr.png")
    if not made:
        raise ManifestError("no score dumps, ASR reports or sweeps found in the given runs")
    for m in made:
        print(out / m)
    return {"plots": made}


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "finetune": cmd_finetune,
    "detect": cmd_detect, "attack": cmd_attack, "eval": cmd_eval, "report": cmd_report,
}


def _exit_code(exc: BaseException) -> int:
    from .evalkit.metrics import SingleClassOnly
    from .evasion import NoCorrectlyDetectedFakes

    if isinstance(exc, (ConfigInvalid, InvalidRange)):
        return EXIT_CONFIG
    if isinstance(exc, (FileNotFoundError, ManifestError, InsufficientSamples, SingleClassOnly, CorruptCheckpoint,
                        VersionMismatch, ShapeMismatch, NoCorrectlyDetectedFakes)):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        out = _fresh_dir(cfg["out"])
        (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")
        result = COMMANDS[args.command](cfg, out)
        (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")
        from .evalkit.reports import write_report

        write_report(out / "report.json", result, {k: v for k, v in cfg.items() if k != "out"}, cfg["seed"])
    except (IdConfusionError, OSError, ValueError, RuntimeError) as exc:
        code = _exit_code(exc)
        print(f"idconfusion {args.command}: error: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
