"""Command-line interface: init-config, generate, fit, eval, summarize.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dataset import Dataset, DatasetError, build_context, read_dataset, write_dataset
from .evaluation import coverage_ratios, evaluate, purity_and_coverage, shot_segmentation, significant_clusters
from .inference import FitConfig, FitResult, InvariantError, check_state, fit, fit_online
from .model import JUNK, ContractError, ModelState
from .synthesis import generate_tccrf, generate_tccrp

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Result and truth files
# ---------------------------------------------------------------------------


def write_truth(path: Path, dataset: Dataset, truth: ModelState, mode: str) -> None:
    doc = {
        "mode": mode,
        "ids": [r.id for r in dataset.records],
        "labels": [r.truth_label for r in dataset.records],
        "z": truth.z.tolist(),
        "c": truth.c.tolist(),
        "atoms": {str(k): phi.tolist() for k, phi in truth.atoms().items()},
    }
    path.write_text(json.dumps(doc) + "\n")


def read_truth(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read truth file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"truth file {path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("ids"), list) or not isinstance(doc.get("labels"), list):
        raise DataError(f"truth file {path}: expected an object with 'ids' and 'labels' lists")
    if len(doc["ids"]) != len(doc["labels"]):
        raise DataError(f"truth file {path}: 'ids' and 'labels' differ in length")
    return doc


def write_result(out: Path, dataset: Dataset, result: FitResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    st = result.state
    with open(out / "assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "z", "c"])
        for r, k, ci in zip(dataset.records, st.z.tolist(), st.c.tolist()):
            w.writerow([r.id, k, ci])
    with open(out / "atoms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "n", *[f"phi{j}" for j in range(dataset.dim)]])
        for k, comp in sorted(st.components.items()):
            w.writerow([k, comp.n, *[repr(float(v)) for v in comp.phi]])
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "log_joint", "n_components"])
        for t, (v, k) in enumerate(zip(result.trace.tolist(), result.n_components.tolist())):
            w.writerow([t, repr(v), k])
    # wall-clock lives apart so the files above stay byte-reproducible
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "seconds"])
        for t, v in enumerate(result.sweep_seconds.tolist()):
            w.writerow([t, f"{v:.6f}"])


def read_assignments(path: Path) -> tuple[list[int], np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read assignments {path}: {exc.strerror}") from exc
    if not rows or rows[0] != ["id", "z", "c"]:
        raise DataError(f"{path}: expected header 'id,z,c'")
    ids, z, c = [], [], []
    for line, row in enumerate(rows[1:], start=2):
        try:
            a, b, d = (int(x) for x in row)
        except ValueError:
            raise DataError(f"{path}: line {line}: expected three integers") from None
        ids.append(a)
        z.append(b)
        c.append(d)
    return ids, np.array(z, dtype=np.int64), np.array(c, dtype=np.int8)


def _check_ids(expected: list[int], got: list[int], what: str) -> None:
    for a, b in zip(expected, got):
        if a != b:
            raise DataError(f"{what}: id mismatch, first offending id {b} (dataset has {a})")
    if len(expected) != len(got):
        extra = got[len(expected)] if len(got) > len(expected) else expected[len(got)]
        raise DataError(f"{what}: {len(got)} ids vs {len(expected)} in the dataset; first offending id {extra}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _read_data(path: str | None) -> Dataset:
    if not path:
        raise UsageError("a dataset path is required (--data or [paths] data)")
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset {path} does not exist") from None
    except DatasetError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_init_config(args) -> int:
    text = RunConfig().dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    s = cfg.synthesis
    for key, attr in (("mode", "mode"), ("n", "n_tracklets"), ("dim", "dim"), ("seed", "seed"), ("segments", "n_segments"), ("encoding", "encoding")):
        value = getattr(args, key)
        if value is not None:
            setattr(s, attr, value)
    if args.segments is not None and args.mode is None:
        s.mode = "tccrf"
    cfg.validate()
    out = Path(args.out or cfg.paths.data or "")
    if not str(out):
        raise UsageError("an output path is required (--out or [paths] data)")
    truth_path = Path(args.truth_out) if args.truth_out else out.with_name(out.name + ".truth.json")
    hyper = cfg.hyper_params(s.dim)
    gen = generate_tccrp if s.mode == "tccrp" else generate_tccrf
    dataset, _, truth = gen(cfg.plan(), hyper)
    try:
        write_dataset(dataset, out, s.encoding)
        write_truth(truth_path, dataset, truth, s.mode)
    except OSError as exc:
        raise DataError(f"cannot write output: {exc}") from exc
    k = sum(1 for comp in truth.components.values() if comp.n > 0)
    print(f"wrote {out} ({len(dataset.records)} tracklets, d={dataset.dim})")
    print(f"wrote {truth_path}")
    print(f"components = {k}")
    print(f"junk = {int(np.sum(truth.z == JUNK))}")
    return EXIT_OK


def _run_chain(payload) -> FitResult:
    Y, context, fc, records = payload
    if fc.online:
        return fit_online(records, fc)
    return fit(Y, context, fc)


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    f = cfg.fit
    for key, attr in (("mode", "mode"), ("sweeps", "n_sweeps"), ("burn_in", "burn_in"), ("seed", "seed"), ("chains", "chains"), ("samples_per_point", "online_samples_per_point")):
        value = getattr(args, key)
        if value is not None:
            setattr(f, attr, value)
    if args.online:
        f.online = True
    if args.no_hyper_update:
        f.hyper_update_enabled = False
    cfg.validate()
    dataset = _read_data(args.data or cfg.paths.data)
    if not dataset.records:
        raise DataError("dataset has no records")
    out = Path(args.out or cfg.paths.result or "")
    if not str(out):
        raise UsageError("an output directory is required (--out or [paths] result)")
    Y = dataset.features.astype(np.float64)
    hyper = cfg.hyper_params(dataset.dim, Y)
    context = build_context(dataset.records, hyper)
    base = cfg.fit_config(hyper)
    if f.chains == 1:
        configs = [base]
    else:
        seeds = [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(f.seed).spawn(f.chains)]
        configs = [FitConfig(**{**base.__dict__, "seed": s}) for s in seeds]
    payloads = [(Y, context, fc, dataset.records) for fc in configs]
    if len(payloads) == 1:
        results = [_run_chain(payloads[0])]
    else:
        with ProcessPoolExecutor(max_workers=min(len(payloads), args.workers or len(payloads))) as pool:
            results = list(pool.map(_run_chain, payloads))
    for j, (fc, res) in enumerate(zip(configs, results)):
        check_state(res.state, context, fc.mode)
        target = out if len(results) == 1 else out / f"chain{j}"
        try:
            write_result(target, dataset, res)
        except OSError as exc:
            raise DataError(f"cannot write results: {exc}") from exc
        print(
            f"chain {j}: seed={fc.seed} components={len(res.state.components)} "
            f"junk={int(np.sum(res.state.z == JUNK))} final_log_joint={float(res.trace[-1])!r} -> {target}"
        )
    return EXIT_OK


def _labels_for_eval(args, dataset: Dataset) -> list:
    if args.truth:
        doc = read_truth(Path(args.truth))
        _check_ids([r.id for r in dataset.records], [int(x) for x in doc["ids"]], f"truth file {args.truth}")
        return doc["labels"]
    labels = dataset.labels
    if all(l is None for l in labels):
        raise DataError("no ground truth: the dataset carries no labels and no --truth file was given")
    return labels


def _load_eval_inputs(args, cfg: RunConfig):
    dataset = _read_data(args.data or cfg.paths.data)
    result = Path(args.result or cfg.paths.result or "")
    if not str(result):
        raise UsageError("a result path is required (--result or [paths] result)")
    path = result / "assignments.csv" if result.is_dir() else result
    ids, z, c = read_assignments(path)
    _check_ids([r.id for r in dataset.records], ids, str(path))
    labels = _labels_for_eval(args, dataset)
    hyper = cfg.hyper_params(dataset.dim, dataset.features.astype(np.float64))
    return dataset, result, z, labels, hyper


def _report_dir(args, cfg: RunConfig, result: Path) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.paths.report:
        return Path(cfg.paths.report)
    return result if result.is_dir() else result.parent


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset, result, z, labels, hyper = _load_eval_inputs(args, cfg)
    context = build_context(dataset.records, hyper)
    report = evaluate(z, dataset.records, context, hyper, labels, dataset.n_frames)
    out = _report_dir(args, cfg, result)
    out.mkdir(parents=True, exist_ok=True)
    flat = report.to_flat()
    (out / "report.txt").write_text(flat)
    (out / "report.json").write_text(report.to_json())
    sys.stdout.write(flat)
    return EXIT_OK


def cmd_summarize(args) -> int:
    cfg = _load_config(args)
    dataset, result, z, labels, hyper = _load_eval_inputs(args, cfg)
    kept, _ = significant_clusters(z, labels, hyper)
    _, entity_cov, tracklet_cov = purity_and_coverage(kept, labels, hyper)
    conc, rep = coverage_ratios(entity_cov, tracklet_cov, len(kept))
    shots = shot_segmentation(z, dataset.records, hyper, labels, dataset.n_frames)
    summary = {
        "n_significant_clusters": len(kept),
        "entity_coverage": entity_cov,
        "tracklet_coverage": tracklet_cov,
        "conciseness": conc,
        "representativeness": rep,
        "representativeness_x100": None if rep is None else 100.0 * rep,
        "n_significant_segments": shots.n_significant_segments,
        "shot_coverage": shots.shot_coverage,
        "frame_coverage": shots.frame_coverage,
        "shot_conciseness": shots.shot_conciseness,
        "shot_representativeness": shots.shot_representativeness,
    }
    out = _report_dir(args, cfg, result)
    out.mkdir(parents=True, exist_ok=True)
    flat = "".join(f"{k} = {'NA' if v is None else repr(v) if isinstance(v, float) else v}\n" for k, v in summary.items())
    (out / "summary.txt").write_text(flat)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "segments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start_frame", "end_frame", "n_frames", "significant", "clusters"])
        for seg, sig in zip(shots.segments, shots.significant):
            w.writerow([seg.start, seg.end, seg.n_frames, int(sig), " ".join(str(k) for k in sorted(seg.labels))])
    sys.stdout.write(flat)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tcclust", description="Temporally coherent nonparametric clustering of tracklets.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("init-config", help="print a configuration file with every default")
    q.add_argument("--out", help="write to this file instead of stdout")
    q.set_defaults(func=cmd_init_config)

    q = sub.add_parser("generate", help="sample a synthetic dataset and its ground truth")
    q.add_argument("--config")
    q.add_argument("--mode", choices=["tccrp", "tccrf"])
    q.add_argument("--n", type=int, help="number of tracklets")
    q.add_argument("--dim", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--segments", type=int, help="number of temporal segments (implies tccrf)")
    q.add_argument("--encoding", choices=["text", "binary"])
    q.add_argument("--out", help="dataset path")
    q.add_argument("--truth-out", help="truth sidecar path (default: <out>.truth.json)")
    q.set_defaults(func=cmd_generate)

    q = sub.add_parser("fit", help="cluster a dataset")
    q.add_argument("--config")
    q.add_argument("--data")
    q.add_argument("--out", help="result directory")
    q.add_argument("--mode", choices=["tccrp", "tccrf", "crp-baseline"])
    q.add_argument("--online", action="store_true", help="single forward pass instead of Gibbs sweeps")
    q.add_argument("--sweeps", type=int)
    q.add_argument("--burn-in", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--samples-per-point", type=int, help="online draws per tracklet")
    q.add_argument("--no-hyper-update", action="store_true")
    q.add_argument("--chains", type=int)
    q.add_argument("--workers", type=int, help="processes for --chains (default: one per chain)")
    q.set_defaults(func=cmd_fit)

    for name, func, text in (
        ("eval", cmd_eval, "score a result against ground truth"),
        ("summarize", cmd_summarize, "entity and shot summarization metrics plus a segment dump"),
    ):
        q = sub.add_parser(name, help=text)
        q.add_argument("--config")
        q.add_argument("--data")
        q.add_argument("--result", help="result directory or assignments.csv")
        q.add_argument("--truth", help="truth sidecar JSON (default: labels stored in the dataset)")
        q.add_argument("--out", help="report directory (default: the result directory)")
        q.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"tcclust: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError) as exc:
        print(f"tcclust: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"tcclust: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
