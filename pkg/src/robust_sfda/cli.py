"""Command-line front end.

Every verb reads the experiment YAML plus whatever earlier verbs left in the
output directory, and writes its own artifacts next to them::

    out/
      data/<domain>/{train,test}/   PNG + JSON samples, manifest.json
      checkpoints/*.ckpt
      traces/*.csv                  per-step training loss
      reports/*.csv|json|md|png
      manifests/<verb>.json         resolved config and inputs of the last run
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__
from .config import ExperimentConfig, load_config
from .metrics import MetricsReport
from .model import Checkpoint, load_checkpoint
from .pipeline import adapt_target, ablation_weights, evaluate, train_source
from .pseudo import FLOWS
from .synthdata import generate_dataset, load_dataset, save_dataset

log = logging.getLogger("robust_sfda")

SOURCE_ROLES = ("standard_source", "robust_source")
ABLATIONS = {
    "seg_only": set(),
    "seg_boundary": {"boundary"},
    "seg_entropy": {"entropy"},
    "full": {"boundary", "entropy"},
}


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, hint: str):
        super().__init__(f"missing {path} ({hint})")
        self.path = Path(path)


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def data(self, domain: str, split: str) -> Path:
        return self.root / "data" / domain / split

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def trace(self, name: str) -> Path:
        return self.root / "traces" / f"{name}.csv"

    def report(self, name: str, ext: str) -> Path:
        return self.root / "reports" / f"{name}.{ext}"

    def manifest(self, verb: str) -> Path:
        return self.root / "manifests" / f"{verb}.json"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, hint)
    return path


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def _write_trace(path: Path, trace: Sequence[float], steps_per_epoch: int) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, i // max(1, steps_per_epoch), repr(float(v))])
    return path


def _save_ckpt(lay: Layout, name: str, ckpt: Checkpoint, n_samples: int) -> None:
    ckpt.save(lay.checkpoint(name))
    _write_trace(lay.trace(name), ckpt.loss_trace, -(-n_samples // ckpt.config.get("batch_size", 8)))


def _manifest(lay: Layout, verb: str, cfg: ExperimentConfig, inputs=(), outputs=(), **extra) -> None:
    doc = {
        "verb": verb,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "inputs": sorted(str(Path(p).relative_to(lay.root)) for p in inputs),
        "outputs": sorted(str(Path(p).relative_to(lay.root)) for p in outputs),
        **extra,
    }
    _write_json(lay.manifest(verb), doc)


# -- verbs -------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, lay: Layout) -> list[Path]:
    """Source train (labeled), compound train (unlabeled) and labeled test splits."""
    s, n = cfg.image_size, cfg.sizes
    jobs = [(cfg.source, "train", True, n.source_train, 0)]
    jobs += [(d, "train", False, n.target_train, 0) for d in cfg.compound]
    jobs += [(d, "test", True, n.test, n.test_start) for d in (*cfg.compound, *cfg.open)]
    written = []
    for spec, split, labeled, count, start in jobs:
        samples = generate_dataset(spec, count, labeled=labeled, size=s, start=start)
        meta = {"domain": spec.to_dict(), "split": split, "labeled": labeled, "image_size": s}
        written.append(save_dataset(samples, lay.data(spec.domain_id, split), meta))
    _manifest(lay, "generate", cfg, outputs=written)
    return written


def cmd_train_source(cfg: ExperimentConfig, lay: Layout, roles: Sequence[str] = SOURCE_ROLES) -> list[Path]:
    src = lay.data(cfg.source.domain_id, "train")
    manifest = _require(src / "manifest.json", "run `generate` first")
    samples = load_dataset(src, labeled=True)
    out = []
    for role in roles:
        stage = "source_standard" if role == "standard_source" else "source_robust"
        t = time.perf_counter()
        ckpt = train_source(samples, cfg.train_config(stage))
        log.info("%s trained in %.1fs", role, time.perf_counter() - t)
        _save_ckpt(lay, role, ckpt, len(samples))
        out.append(lay.checkpoint(role))
    _manifest(lay, "train-source", cfg, inputs=[manifest], outputs=out)
    return out


def _source_ckpts(lay: Layout, flows: Sequence[str]) -> dict[str, Checkpoint]:
    need = {"standard_source"} if set(flows) <= {"standard"} else set(SOURCE_ROLES)
    if set(flows) == {"robust"}:
        need = {"robust_source"}
    return {r: load_checkpoint(_require(lay.checkpoint(r), "run `train-source` first")) for r in sorted(need)}


def _target_train(cfg: ExperimentConfig, lay: Layout):
    # only the unlabeled compound target splits; nothing under the source domain is opened
    samples, manifests = [], []
    for d in cfg.compound:
        path = lay.data(d.domain_id, "train")
        manifests.append(_require(path / "manifest.json", "run `generate` first"))
        samples += load_dataset(path, labeled=False)
    return samples, manifests


def cmd_adapt(cfg: ExperimentConfig, lay: Layout, flows: Sequence[str]) -> list[Path]:
    sources = _source_ckpts(lay, flows)
    samples, manifests = _target_train(cfg, lay)
    out = []
    for flow in flows:
        t = time.perf_counter()
        ckpt = adapt_target(sources, samples, cfg.train_config("target", flow))
        log.info("flow %s adapted in %.1fs", flow, time.perf_counter() - t)
        _save_ckpt(lay, f"target_{flow}", ckpt, len(samples))
        out.append(lay.checkpoint(f"target_{flow}"))
    inputs = [lay.checkpoint(r) for r in sources] + manifests
    _manifest(lay, "adapt", cfg, inputs=inputs, outputs=out, flows=list(flows))
    return out


def _test_sets(cfg: ExperimentConfig, lay: Layout):
    sets = {}
    for d in (*cfg.compound, *cfg.open):
        path = lay.data(d.domain_id, "test")
        _require(path / "manifest.json", "run `generate` first")
        sets[d.domain_id] = load_dataset(path, labeled=True)
    return sets


def _write_report(lay: Layout, name: str, report: MetricsReport) -> list[Path]:
    csv_path, json_path = lay.report(name, "csv"), lay.report(name, "json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(csv_path)
    report.to_json(json_path)
    return [csv_path, json_path]


def cmd_eval(cfg: ExperimentConfig, lay: Layout, variants: Optional[Sequence[str]] = None) -> list[Path]:
    """Clean + adversarial metrics for every checkpoint present (or the named ones)."""
    if variants is None:
        names = [*SOURCE_ROLES, *(f"target_{f}" for f in FLOWS)]
        variants = [n for n in names if lay.checkpoint(n).exists()]
        if not variants:
            raise MissingArtifact(lay.checkpoint("standard_source"), "no checkpoints to evaluate")
    tests = _test_sets(cfg, lay)
    out, inputs = [], []
    for name in variants:
        path = _require(lay.checkpoint(name), "train or adapt it first")
        inputs.append(path)
        t = time.perf_counter()
        report = evaluate(load_checkpoint(path).model, tests, cfg.attack, cfg.open_ids)
        log.info("%s evaluated in %.1fs", name, time.perf_counter() - t)
        out += _write_report(lay, name, report)
    out += cmd_report(cfg, lay, variants, write_manifest=False)
    _manifest(lay, "eval", cfg, inputs=inputs, outputs=out, variants=list(variants))
    return out


def cmd_ablate(cfg: ExperimentConfig, lay: Layout, flow: Optional[str] = None) -> list[Path]:
    flow = flow or cfg.ablation_flow
    sources = _source_ckpts(lay, [flow])
    samples, manifests = _target_train(cfg, lay)
    tests = _test_sets(cfg, lay)
    base = cfg.train_config("target", flow)
    out, names = [], []
    for variant, which in ABLATIONS.items():
        ckpt = adapt_target(sources, samples, replace(base, weights=ablation_weights(which, base.weights)))
        name = f"ablation_{flow}_{variant}"
        _save_ckpt(lay, name, ckpt, len(samples))
        report = evaluate(ckpt.model, tests, None, cfg.open_ids)
        out += [lay.checkpoint(name), *_write_report(lay, name, report)]
        names.append(name)
    out += cmd_report(cfg, lay, names, stem=f"ablation_{flow}", write_manifest=False)
    inputs = [lay.checkpoint(r) for r in sources] + manifests
    _manifest(lay, "ablate", cfg, inputs=inputs, outputs=out, flow=flow)
    return out


def _load_reports(lay: Layout, names: Sequence[str]) -> dict[str, dict]:
    return {n: json.loads(_require(lay.report(n, "json"), "run `eval` first").read_text()) for n in names}


def _summary_table(reports: dict[str, dict]) -> str:
    lines = []
    for scope in ("C", "C+O"):
        lines += [f"### {scope}", "", "| variant | clean Dice | clean ASD | adv Dice | adv ASD |", "|---|---|---|---|---|"]
        for name, doc in reports.items():
            agg = doc["aggregates"]
            cells = []
            for cond in ("clean", "adversarial"):
                vals = agg.get(cond, {}).get(scope)
                cells += ["-", "-"] if vals is None else [f"{100 * vals['dice']:.2f}", f"{vals['asd']:.2f}"]
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def _bar_chart(reports: dict[str, dict], metric: str, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    names = list(reports)
    conds = ["clean", "adversarial"]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2, 3.5))
    for i, cond in enumerate(conds):
        vals = []
        for n in names:
            v = reports[n]["aggregates"].get(cond, {}).get("C+O")
            vals.append(np.nan if v is None else (100 * v[metric] if metric == "dice" else v[metric]))
        ax.bar(x + (i - 0.5) * 0.38, vals, 0.38, label=cond)
    ax.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("Dice (%)" if metric == "dice" else "ASD (px)")
    ax.set_title(f"{metric.upper()} over compound + open domains")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def cmd_report(
    cfg: ExperimentConfig, lay: Layout, variants: Optional[Sequence[str]] = None, stem: str = "summary", write_manifest=True
) -> list[Path]:
    """Markdown table plus Dice/ASD bar charts from report JSONs already on disk."""
    if variants is None:
        variants = sorted(p.stem for p in (lay.root / "reports").glob("*.json"))
        if not variants:
            raise MissingArtifact(lay.root / "reports", "run `eval` first")
    reports = _load_reports(lay, variants)
    md = lay.report(stem, "md")
    md.write_text(f"# {cfg.name}\n\nDice in %, ASD in pixels; C = compound targets, C+O adds open targets.\n\n" + _summary_table(reports))
    out = [md, _bar_chart(reports, "dice", lay.report(f"{stem}_dice", "png")), _bar_chart(reports, "asd", lay.report(f"{stem}_asd", "png"))]
    if write_manifest:
        _manifest(lay, "report", cfg, inputs=[lay.report(v, "json") for v in variants], outputs=out)
    return out


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, code=2)


def _fail(kind: str, message: str, code: int = 1, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    sys.exit(code)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robust-sfda", description="Robust source-free adaptation experiments on synthetic fundus data.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment YAML")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    common.add_argument("--scale", type=float, help="multiply every stage's epoch count")
    common.add_argument("--attack-steps", type=int, help="PGD steps for evaluation")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bit-identical)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("generate", parents=[common], help="write synthetic datasets")
    ts = sub.add_parser("train-source", parents=[common], help="train standard and robust source models")
    ts.add_argument("--role", choices=SOURCE_ROLES, action="append", help="train only this source model")
    ad = sub.add_parser("adapt", parents=[common], help="source-free target adaptation")
    ad.add_argument("--flow", choices=FLOWS, action="append", help="flow(s) to run (default: config flows)")
    sub.add_parser("eval", parents=[common], help="clean and adversarial metrics, tables and plots")
    ab = sub.add_parser("ablate", parents=[common], help="loss-component ablation")
    ab.add_argument("--flow", choices=FLOWS, action="append")
    sub.add_parser("report", parents=[common], help="rebuild summary table and plots from reports on disk")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config, seed=args.seed, scale=args.scale, attack_steps=args.attack_steps, out=args.out)
        lay = Layout(cfg.output_dir)
        if args.verb == "generate":
            out = cmd_generate(cfg, lay)
        elif args.verb == "train-source":
            out = cmd_train_source(cfg, lay, args.role or SOURCE_ROLES)
        elif args.verb == "adapt":
            out = cmd_adapt(cfg, lay, args.flow or cfg.flows)
        elif args.verb == "eval":
            out = cmd_eval(cfg, lay)
        elif args.verb == "ablate":
            out = [p for f in (args.flow or [cfg.ablation_flow]) for p in cmd_ablate(cfg, lay, f)]
        else:
            out = cmd_report(cfg, lay)
    except MissingArtifact as e:
        _fail("missing_artifact", str(e), path=str(e.path))
    except (ValueError, FileNotFoundError, KeyError, TypeError) as e:
        _fail(type(e).__name__, str(e))
    for p in out:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
