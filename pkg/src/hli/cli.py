"""Command-line entry point: pretrain, adapt, eval and ablate.

Every invocation writes a fresh run directory under ``--out-dir`` (default
``$HLI_OUT_DIR`` or ``./runs``) holding ``manifest.json``, the echoed
``config.ini`` and all artifacts.  Existing directories are never reused.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
import dataclasses
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_to_dict, load_config, write_config
from .datagen import DatasetSpec, TargetView, generate_domain_pair, to_chw
from .evaluation import plot_cmc, write_result_csv
from .model import ReIDNet, embed_images, load_checkpoint, read_manifest, save_checkpoint
from .train import AdaptResult, TrainConfig, adapt, evaluate_model, pretrain_source

log = logging.getLogger("hli")

EXIT_USAGE = 2

RUNGS = {
    # component ladder: structure distillation, then adaptive erasing, then selective imitation
    "baseline": dict(lambda_imi_t=0.0, lambda_sd_t=0.0, prob=0.0),
    "alms": dict(lambda_imi_t=0.0, prob=0.0),
    "alms+aulm": dict(lambda_imi_t=0.0),
    "hli": dict(),
}
ABLATION_COLUMNS = (
    "group", "arm", "value", "n_seeds", "mAP_mean", "mAP_std", "top1_mean", "top1_std", "top5_mean",
    "best_mAP_mean", "pretrain_mAP_mean", "pretrain_top1_mean",
)  # fmt: skip
RUN_COLUMNS = ("group", "arm", "value", "seed", "mAP", "top1", "top5", "best_mAP", "pretrain_mAP", "pretrain_top1")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run directories


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("HLI_OUT_DIR") or "runs")


def new_run_dir(root: Path, name: str) -> Path:
    """``root/name``, or ``root/name-1``, ``-2``... if taken.  Never reuses."""
    root.mkdir(parents=True, exist_ok=True)
    for i in range(10_000):
        path = root / (name if i == 0 else f"{name}-{i}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {root}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


class Run:
    """A run directory plus its manifest.  Used as a context manager the
    manifest is always written, with ``status`` "failed" on an exception."""

    def __init__(self, command: str, cfg: RunConfig, root: Path, argv: list[str]):
        self.dir = new_run_dir(root, f"{command}-seed{cfg.seed}")
        self.manifest = {
            "command": command,
            "argv": argv,
            "version": __version__,
            "seed": cfg.seed,
            "config": config_to_dict(cfg),
            "started": _now(),
            "finished": None,
            "status": "running",
            "artifacts": {},
            "results": {},
        }
        write_config(cfg, self.dir / "config.ini")
        self.add("config", "config.ini")

    def add(self, key: str, name: str | Path) -> Path:
        path = self.dir / name
        self.manifest["artifacts"][key] = str(Path(name))
        return path

    def finish(self, status: str = "completed") -> Path:
        self.manifest["finished"] = _now()
        self.manifest["status"] = status
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(_jsonable(self.manifest), indent=2, sort_keys=True))
        return path

    def __enter__(self) -> "Run":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc is not None:
            self.manifest["error"] = f"{exc_type.__name__}: {exc}"
            self.finish("failed")
        elif self.manifest["finished"] is None:
            self.finish()
        return False


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _require_checkpoint(path: str | None) -> Path:
    if not path:
        raise UsageError("--checkpoint is required")
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not (p.with_suffix(".json").is_file() and p.with_suffix(".bin").is_file()):
        raise UsageError(f"checkpoint {path!r} not found (expected {p}.json and {p}.bin)")
    return p


def _load_model(path: Path, spec: DatasetSpec) -> ReIDNet:
    try:
        model, _ = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        raise UsageError(f"checkpoint {str(path)!r} is unreadable: {err}") from None
    if model.input_size != (spec.image_height, spec.image_width):
        raise UsageError(
            f"checkpoint expects {model.input_size} images but the dataset renders "
            f"{(spec.image_height, spec.image_width)}"
        )
    model.eval()
    return model


def _model_from_state(template: ReIDNet, state: dict) -> ReIDNet:
    model = copy.deepcopy(template)
    model.reset_classifier(state["classifier.weight"].shape[0])
    model.load_state_dict(state)
    return model.eval()


def _eval_summary(res) -> dict:
    return {"mAP": res.mAP, "top1": res.top(1), "top5": res.top(5), "top10": res.top(10), "n_skipped": res.n_skipped}


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    with Run("pretrain", cfg, out_root(args.out_dir), args.argv) as run:
        source, _ = generate_domain_pair(cfg.dataset)
        model, metrics = pretrain_source(source, cfg.train)
        steps = cfg.train.epochs_pretrain * cfg.train.steps_per_epoch
        save_checkpoint(model, run.add("checkpoint", "pretrain"), step=steps, role="student", config=run.manifest["config"])
        run.add("checkpoint_payload", "pretrain.bin")
        metrics.to_csv(run.add("metrics", "pretrain_metrics.csv"))
        final = metrics.rows[-1] if metrics.rows else {}
        run.manifest["results"] = {"train_top1": final.get("train_top1"), "epochs": cfg.train.epochs_pretrain}
    print(f"pretrain run: {run.dir}")
    if final:
        print(f"final source train top-1: {final['train_top1']:.4f}")
    return 0


def _write_adapt_artifacts(run: Run, result: AdaptResult, template: ReIDNet, target: TargetView) -> dict:
    result.log.to_csv(run.add("metrics", "adapt_metrics.csv"))
    result.steps.to_csv(run.add("step_losses", "step_losses.csv"))
    step = result.teacher.step
    config = run.manifest["config"]

    best = result.best
    best_model = _model_from_state(template if best.epoch == 0 else result.student, best.state)
    extra = {"epoch": best.epoch, "mAP": best.mAP}
    save_checkpoint(best_model, run.add("best_checkpoint", "best"), step=step, role=best.role, config=config, extra=extra)
    save_checkpoint(result.student, run.add("last_student", "last_student"), step=step, role="student", config=config)
    save_checkpoint(result.teacher.model, run.add("last_teacher", "last_teacher"), step=step, role="teacher",
                    config=config)  # fmt: skip

    images = to_chw(target.images)
    res_pre = evaluate_model(template, target, images)
    res_s = evaluate_model(result.student, target, images)
    res_t = evaluate_model(result.teacher.model, target, images)
    res_best = evaluate_model(best_model, target, images)
    write_result_csv(res_best, run.add("best_eval", "best_eval.csv"))
    plot_cmc(
        {"pretrain": res_pre.cmc_curve, "student": res_s.cmc_curve, "teacher": res_t.cmc_curve},
        run.add("cmc_plot", "cmc.png"),
    )
    return {
        "best": {"role": best.role, "epoch": best.epoch, "mAP": best.mAP, "recomputed_mAP": res_best.mAP},
        "pretrain": _eval_summary(res_pre),
        "final_student": _eval_summary(res_s),
        "final_teacher": _eval_summary(res_t),
        "final_inertia": result.final.get("inertia"),
    }


def cmd_adapt(args) -> int:
    ckpt = _require_checkpoint(args.checkpoint)
    cfg = _config(args)
    template = _load_model(ckpt, cfg.dataset)
    with Run("adapt", cfg, out_root(args.out_dir), args.argv) as run:
        run.manifest["checkpoint"] = str(ckpt)
        _, target_records = generate_domain_pair(cfg.dataset)
        target = TargetView(target_records)
        if args.debug_erase:
            from .aulm import dump_erase_examples

            n = min(args.debug_erase, len(target))
            imgs = to_chw(target.images)
            pred = embed_images(template, imgs[:n]).logits.argmax(1)
            dump_erase_examples(template, imgs[:n], pred, cfg.train.erase, run.add("erase_debug", "erase_debug"),
                                imgs.mean(axis=(0, 2, 3)))  # fmt: skip
        result = adapt(template, target, cfg.train)
        run.manifest["results"] = _write_adapt_artifacts(run, result, template, target)
        run.manifest["label_reads"] = {"evaluation": len(target.reads), "during_gradient": target.reads_during_gradient}
    r = run.manifest["results"]
    print(f"adapt run: {run.dir}")
    print(f"pretrain  mAP {r['pretrain']['mAP']:.4f} top-1 {r['pretrain']['top1']:.4f}")
    print(f"teacher   mAP {r['final_teacher']['mAP']:.4f} top-1 {r['final_teacher']['top1']:.4f}")
    print(f"best      mAP {r['best']['mAP']:.4f} ({r['best']['role']}, epoch {r['best']['epoch']})")
    return 0


def _dataset_for_eval(args) -> DatasetSpec:
    """Dataset from a run manifest (.json) or an INI config; defaults otherwise."""
    source = args.dataset_spec or args.config
    if source and Path(source).suffix == ".json":
        try:
            manifest = json.loads(Path(source).read_text())
            spec = DatasetSpec(**manifest["config"]["dataset"], seed=manifest["seed"])
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read a dataset spec from {source!r}: {err}") from None
        spec.validate()
        return spec
    cfg = load_config(source)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.dataset


def cmd_eval(args) -> int:
    ckpt = _require_checkpoint(args.checkpoint)
    spec = _dataset_for_eval(args)
    model = _load_model(ckpt, spec)
    seed = spec.seed
    cfg = RunConfig(seed, spec, TrainConfig(seed=seed))
    with Run("eval", cfg, out_root(args.out_dir), args.argv) as run:
        run.manifest["checkpoint"] = str(ckpt)
        run.manifest["checkpoint_manifest"] = read_manifest(ckpt)
        _, target_records = generate_domain_pair(spec)
        target = TargetView(target_records)
        res = evaluate_model(model, target)
        write_result_csv(res, run.add("metrics", "eval_metrics.csv"))
        plot_cmc({ckpt.name: res.cmc_curve}, run.add("cmc_plot", "cmc.png"))
        run.manifest["results"] = _eval_summary(res)
    print(f"eval run: {run.dir}")
    print(f"mAP {res.mAP!r}")
    print("CMC " + " ".join(f"top{k}={res.top(k):.4f}" for k in (1, 5, 10)))
    return 0


def _parse_list(text: str | None, kind) -> list:
    if not text:
        return []
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise UsageError(f"cannot parse list {text!r}: {err}") from None


def ablation_arms(base: TrainConfig, components, probs, ks, random_arm: bool) -> list[tuple[str, str, str, TrainConfig]]:
    """(group, arm, value, config) for every requested arm."""

    def variant(lambda_imi_t=None, lambda_sd_t=None, prob=None, **train):
        w = base.loss_weights
        e = base.erase
        weights = dataclasses.replace(
            w,
            lambda_imi_t=w.lambda_imi_t if lambda_imi_t is None else lambda_imi_t,
            lambda_sd_t=w.lambda_sd_t if lambda_sd_t is None else lambda_sd_t,
        )
        erase = dataclasses.replace(e, prob=e.prob if prob is None else prob)
        return dataclasses.replace(base, loss_weights=weights, erase=erase, **train)

    arms = []
    for name in components:
        arms.append(("components", name, name, variant(**RUNGS[name])))
    for p in probs:
        arms.append(("prob", f"prob={p:g}", repr(float(p)), variant(prob=p)))
    for k in ks:
        arms.append(("k", f"M_t={k}", str(k), variant(M_t=k)))
    if random_arm:
        arms.append(("points", "cam", "cam", variant()))
        arms.append(("points", "random", "random", variant(erase_points="random")))
    return arms


def _plot_ablation(rows: list[dict], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = list(dict.fromkeys(r["group"] for r in rows))
    fig, axes = plt.subplots(1, len(groups), figsize=(4 * len(groups), 3.5), squeeze=False)
    for ax, g in zip(axes[0], groups):
        sub = [r for r in rows if r["group"] == g]
        x = np.arange(len(sub))
        ax.bar(x, [r["mAP_mean"] for r in sub], yerr=[r["mAP_std"] for r in sub], capsize=3, color="#4878a8")
        ax.set_xticks(x, [r["arm"] for r in sub], rotation=30, ha="right")
        ax.set_ylabel("target mAP")
        ax.set_title(g)
        lo = min(r["mAP_mean"] - r["mAP_std"] for r in sub)
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def run_ablation(cfg: RunConfig, arms, n_seeds: int) -> tuple[list[dict], list[dict]]:
    """Pretrain once per seed, adapt every arm from that model.  Arms with an
    identical training configuration share one run."""
    per_run: list[dict] = []
    for i in range(n_seeds):
        seed_cfg = cfg.with_seed(cfg.seed + i)
        source, target_records = generate_domain_pair(seed_cfg.dataset)
        model, _ = pretrain_source(source, seed_cfg.train)
        cache: dict = {}
        for group, arm, value, arm_cfg in arms:
            arm_cfg = dataclasses.replace(arm_cfg, seed=seed_cfg.seed)
            if arm_cfg not in cache:
                t0 = time.time()
                cache[arm_cfg] = adapt(model, TargetView(target_records), arm_cfg, step_log=False)
                log.info("seed %d %s/%s done in %.0fs", seed_cfg.seed, group, arm, time.time() - t0)
            res = cache[arm_cfg]
            first, last = res.log.rows[0], res.final
            per_run.append({
                "group": group, "arm": arm, "value": value, "seed": seed_cfg.seed,
                "mAP": last["teacher_mAP"], "top1": last["teacher_top1"], "top5": last["teacher_top5"],
                "best_mAP": res.best.mAP, "pretrain_mAP": first["teacher_mAP"], "pretrain_top1": first["teacher_top1"],
            })  # fmt: skip
    table = []
    for group, arm, value, _ in arms:
        rows = [r for r in per_run if r["group"] == group and r["arm"] == arm]
        col = lambda k: np.array([r[k] for r in rows])  # noqa: E731
        table.append({
            "group": group, "arm": arm, "value": value, "n_seeds": len(rows),
            "mAP_mean": col("mAP").mean(), "mAP_std": col("mAP").std(),
            "top1_mean": col("top1").mean(), "top1_std": col("top1").std(), "top5_mean": col("top5").mean(),
            "best_mAP_mean": col("best_mAP").mean(),
            "pretrain_mAP_mean": col("pretrain_mAP").mean(), "pretrain_top1_mean": col("pretrain_top1").mean(),
        })  # fmt: skip
    return table, per_run


def _write_rows(path: Path, columns, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
    return path


def cmd_ablate(args) -> int:
    components = [c.strip().lower() for c in args.components.split(",") if c.strip()] if args.components else []
    unknown = [c for c in components if c not in RUNGS]
    if unknown:
        raise UsageError(f"unknown component(s) {unknown}; choose from {list(RUNGS)}")
    probs = _parse_list(args.prob_sweep, float)
    ks = _parse_list(args.k_sweep, int)
    if not (components or probs or ks or args.random_arm):
        components = list(RUNGS)
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    cfg = _config(args)
    try:
        arms = ablation_arms(cfg.train, components, probs, ks, args.random_arm)
    except ValueError as err:
        raise UsageError(str(err)) from None
    with Run("ablate", cfg, out_root(args.out_dir), args.argv) as run:
        table, per_run = run_ablation(cfg, arms, args.seeds)
        _write_rows(run.add("table", "ablation.csv"), ABLATION_COLUMNS, table)
        _write_rows(run.add("runs", "ablation_runs.csv"), RUN_COLUMNS, per_run)
        _plot_ablation(table, run.add("plot", "ablation.png"))
        run.manifest["results"] = {"n_seeds": args.seeds, "table": table}
    print(f"ablate run: {run.dir}")
    for r in table:
        print(f"{r['group']:>10} {r['arm']:>12}  mAP {r['mAP_mean']:.4f} ± {r['mAP_std']:.4f}  top-1 {r['top1_mean']:.4f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hli",
        description="Teacher-student domain adaptation for re-ID on synthetic data.",
        epilog="commands: pretrain, adapt, eval, ablate",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{pretrain,adapt,eval,ablate}")

    def common(p, checkpoint=False):
        p.add_argument("--config", help="INI config file (defaults apply when omitted)")
        p.add_argument("--out-dir", help="output root (default: $HLI_OUT_DIR or ./runs)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path (without .json/.bin suffix)")

    p = sub.add_parser("pretrain", help="supervised training on the labelled source domain")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="cluster and refine on the unlabelled target domain")
    common(p, checkpoint=True)
    p.add_argument("--debug-erase", type=int, default=0, metavar="N", help="dump N before/after erase images")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="retrieval metrics of a checkpoint on the target domain")
    common(p, checkpoint=True)
    p.add_argument("--dataset-spec", help="INI config or run manifest.json describing the dataset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="component ladder and parameter sweeps over several seeds")
    common(p)
    p.add_argument("--components", help=f"comma list from {','.join(RUNGS)}")
    p.add_argument("--prob-sweep", help="comma list of erase probabilities, e.g. 0,0.4,0.5,0.7")
    p.add_argument("--k-sweep", help="comma list of cluster counts")
    p.add_argument("--random-arm", action="store_true", help="compare CAM-guided and random erase points")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at the configured one")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"hli {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except PermissionError as err:
        print(f"hli {args.command}: error: cannot write output: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
