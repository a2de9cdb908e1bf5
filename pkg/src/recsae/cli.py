"""Command-line entry point: ``recsae <command> [options]``.

Every command reads earlier artifacts by path, writes its own artifacts
into ``--out`` and records a ``manifest_<command>.json`` with the digests of
everything it consumed and produced. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    export_neurons,
    genre_activation_profile,
    neuron_activations,
    neuron_reports,
    read_label_file,
    rows_to_csv,
)
from .artifacts import FingerprintError, file_digest, read_json, write_json, write_manifest
from .data import (
    ConfigError,
    DataFormatError,
    InteractionDataset,
    build_dataset,
    load_lastfm,
    load_metadata,
    load_movielens,
    load_movielens_movies,
)
from .fidelity import beta_sweep, evaluate_fidelity, reconstructed_tables, sweep_csv
from .intervene import (
    InterventionSpec,
    cohort_exposure,
    edit_latent,
    promotion_sweep,
    resolve_audience,
    trajectory_csv,
)
from .mathops import TrainingError, make_rng
from .recommender import RecommenderModel, TrainConfig, mpr, rank_order, score_items, train_recommender
from .sae import SaeTrainConfig, bundle_from_json, bundle_to_json, decode, encode, train_sae
from .synth import make_planted

log = logging.getLogger("recsae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SECTIONS = ("synth", "data", "recommender", "sae", "analysis", "fidelity", "sweep", "intervene")


# --- plumbing ------------------------------------------------------------------

class Outputs:
    """Tracks files written by one command so a failure can remove them."""

    def __init__(self, out_dir: Path):
        self.dir = Path(out_dir)
        self.written: list[str] = []

    def json(self, name: str, doc) -> Path:
        path = write_json(self.dir / name, doc)
        self.written.append(name)
        return path

    def text(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        self.written.append(name)
        return path

    def cleanup(self, command: str) -> None:
        for name in self.written + [f"manifest_{command}.json"]:
            for p in (self.dir / name, self.dir / (name + ".tmp")):
                if p.exists():
                    p.unlink()


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {unknown}; expected a subset of {list(SECTIONS)}")
    return doc


def _section(args, name: str, allowed) -> dict:
    sec = dict(args.config_doc.get(name, {}))
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"config section '{name}' has unknown keys {unknown}")
    return sec


def _override(sec: dict, **flags) -> dict:
    for k, v in flags.items():
        if v is not None:
            sec[k] = v
    return sec


def _seed(args, sec: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(sec.get("seed", 0))


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _float_list(text: str | None):
    if text is None:
        return None
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}")


def _int_list(text: str | None):
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}")


def _load_dataset(path) -> InteractionDataset:
    return InteractionDataset.from_json(read_json(_need(path, "dataset")))


def _load_recommender(path, dataset_path) -> RecommenderModel:
    doc = read_json(_need(path, "recommender"))
    try:
        model = RecommenderModel.from_json(doc)
    except ValueError as exc:
        raise FingerprintError(f"{path}: {exc}")
    expected = doc.get("dataset_sha256")
    if dataset_path is not None and expected is not None and file_digest(dataset_path) != expected:
        raise FingerprintError(f"recommender {path} was trained on a different dataset than {dataset_path}")
    return model


def _load_sae(path, model: RecommenderModel):
    doc = read_json(_need(path, "sae"))
    bundle, cfg, rec_fp = bundle_from_json(doc)
    if rec_fp != model.fingerprint():
        raise FingerprintError(
            f"SAE {path} was trained on recommender {rec_fp[:12]}, but the supplied recommender is "
            f"{model.fingerprint()[:12]}"
        )
    if bundle.user.d != model.d:
        raise FingerprintError(f"SAE expects d={bundle.user.d}, recommender has d={model.d}")
    return bundle, cfg


def _clean(x):
    """JSON-safe copy: NaN becomes None, numpy scalars become Python numbers."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return None if not np.isfinite(x) else float(x)
    return x


# --- commands --------------------------------------------------------------------

DATA_KEYS = ("min_user_positives", "n_test", "val_fraction", "seed", "format", "user_col", "artist_col", "track_col")


def _build(args, raw, metadata, sec: dict, seed: int) -> InteractionDataset:
    return build_dataset(
        raw,
        min_user_positives=int(sec.get("min_user_positives", 6)),
        seed=seed,
        n_test=int(sec.get("n_test", 5)),
        val_fraction=float(sec.get("val_fraction", 0.05)),
        metadata=metadata,
    )


def cmd_prepare(args, out: Outputs) -> dict:
    sec = _override(_section(args, "data", DATA_KEYS), format=args.format)
    seed = _seed(args, sec)
    fmt = sec.get("format", "movielens")
    ratings = _need(args.ratings, "ratings")
    inputs = {"ratings": ratings}
    if fmt == "movielens":
        raw = load_movielens(ratings)
    elif fmt == "lastfm":
        raw = load_lastfm(ratings, int(sec.get("user_col", 0)), int(sec.get("artist_col", 1)), sec.get("track_col", 2))
    else:
        raise ConfigError(f"unknown data format {fmt!r}; expected movielens or lastfm")
    metadata = {}
    if args.movies:
        inputs["movies"] = _need(args.movies, "movies")
        metadata.update(load_movielens_movies(inputs["movies"]))
    if args.metadata:
        inputs["metadata"] = _need(args.metadata, "metadata")
        metadata.update(load_metadata(inputs["metadata"]))
    ds = _build(args, raw, metadata or None, sec, seed)
    out.json("dataset.json", ds.to_json())
    summary = dict(ds.summary(), seed=seed, format=fmt)
    out.json("summary.json", summary)
    print(f"{summary['n_users']} users, {summary['n_items']} items, {summary['n_positives']} positives; splits {summary['splits']}")
    return {"inputs": inputs, "config": dict(sec, format=fmt), "seed": seed}


SYNTH_KEYS = ("n_users", "n_items", "n_concepts", "noise", "seed", "min_positives", "max_positives", "popularity_skew")


def cmd_synth(args, out: Outputs) -> dict:
    sec = _override(
        _section(args, "synth", SYNTH_KEYS),
        n_users=args.n_users, n_items=args.n_items, n_concepts=args.n_concepts, noise=args.noise,
    )
    seed = _seed(args, sec)
    params = {k: v for k, v in sec.items() if k != "seed"}
    planted = make_planted(seed=seed, **params)
    data_sec = _section(args, "data", DATA_KEYS)
    ds = _build(args, planted.interactions, planted.metadata, data_sec, seed)
    out.json("dataset.json", ds.to_json())
    out.json("groundtruth.json", dict(planted.ground_truth(), seed=seed, config=params))
    out.json("summary.json", dict(ds.summary(), seed=seed))
    print(f"planted {len(planted.concept_labels)} concepts over {ds.n_users} users and {ds.n_items} items")
    return {"inputs": {}, "config": {"synth": params, "data": data_sec}, "seed": seed}


REC_KEYS = tuple(f.name for f in fields(TrainConfig)) + ("kind",)


def cmd_train_rec(args, out: Outputs) -> dict:
    sec = _override(_section(args, "recommender", REC_KEYS), kind=args.kind, epochs=args.epochs)
    seed = _seed(args, sec)
    kind = sec.pop("kind", "MF")
    if kind not in ("MF", "NCF"):
        raise ConfigError(f"recommender kind must be MF or NCF, got {kind!r}")
    sec["seed"] = seed
    cfg = TrainConfig(**sec)
    ds_path = _need(args.dataset, "dataset")
    ds = _load_dataset(ds_path)
    model, history = train_recommender(ds, cfg, kind)
    metrics = {"history": history}
    if np.any(ds.split == 2):
        metrics["test_mpr"] = mpr(model, ds, "test")
    if np.any(ds.split == 1):
        metrics["val_mpr"] = mpr(model, ds, "val")
    doc = model.to_json()
    doc.update(train_config=_clean(asdict(cfg)), seed=seed, dataset_sha256=file_digest(ds_path))
    out.json("recommender.json", doc)
    out.json("train_log.json", _clean(dict(metrics, kind=kind, seed=seed)))
    print(f"{kind} d={cfg.d}: test MPR {metrics.get('test_mpr', float('nan')):.4f}, fingerprint {model.fingerprint()[:12]}")
    return {"inputs": {"dataset": ds_path}, "config": dict(_clean(asdict(cfg)), kind=kind), "seed": seed}


SAE_KEYS = tuple(f.name for f in fields(SaeTrainConfig))


def _sae_config(args, seed: int) -> SaeTrainConfig:
    sec = _section(args, "sae", SAE_KEYS)
    sec["seed"] = seed
    try:
        cfg = SaeTrainConfig.from_json(sec)
    except TypeError as exc:
        raise ConfigError(f"config section 'sae': {exc}")
    if getattr(args, "m", None) is not None:
        cfg.m = args.m
    if getattr(args, "levels", None) is not None:
        cfg.levels = args.levels
    if getattr(args, "beta", None) is not None:
        cfg.loss.beta = args.beta
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    return cfg


def cmd_train_sae(args, out: Outputs) -> dict:
    seed = _seed(args, args.config_doc.get("sae", {}))
    cfg = _sae_config(args, seed)
    ds_path = _need(args.dataset, "dataset")
    ds = _load_dataset(ds_path)
    model = _load_recommender(args.recommender, ds_path)
    bundle, report = train_sae(model, ds, cfg)
    out.json("sae.json", bundle_to_json(bundle, cfg, model.fingerprint()))
    out.json("sae_report.json", _clean({"seed": seed, "epochs": report.epochs}))
    fin = report.final
    print(f"SAE m={cfg.m}: final loss {fin.get('total', float('nan')):.5f}, dead fraction {fin.get('dead_fraction', 0.0):.2f}")
    return {
        "inputs": {"dataset": ds_path, "recommender": Path(args.recommender)},
        "config": cfg.to_json(),
        "seed": seed,
    }


ANALYSIS_KEYS = ("ks", "top_t", "side")


def cmd_analyze(args, out: Outputs) -> dict:
    sec = _override(_section(args, "analysis", ANALYSIS_KEYS), ks=_int_list(args.ks), top_t=args.top_t)
    ks = [int(k) for k in sec.get("ks", [10, 20, 50])]
    top_t = int(sec.get("top_t", 30))
    side = sec.get("side", "item")
    if side != "item":
        raise ConfigError("analysis runs over item activations only")
    ds_path = _need(args.dataset, "dataset")
    ds = _load_dataset(ds_path)
    model = _load_recommender(args.recommender, ds_path)
    bundle, sae_cfg = _load_sae(args.sae, model)
    inputs = {"dataset": ds_path, "recommender": Path(args.recommender), "sae": Path(args.sae)}
    labels = None
    if args.labels:
        inputs["labels"] = _need(args.labels, "labels")
        try:
            labels = read_label_file(inputs["labels"])
        except ValueError as exc:
            raise DataFormatError(str(exc))
        bad = [j for j in labels if j >= bundle.item.m]
        if bad:
            raise DataFormatError(f"label file names neurons {bad} but the SAE has {bundle.item.m}")
    acts = neuron_activations(bundle.item, model, "item")
    reports = neuron_reports(acts, ds, model.item_embeddings, labels, ks, top_t)
    doc = export_neurons(reports, ds)
    doc.update(seed=sae_cfg.seed, config={"ks": ks, "top_t": top_t})
    out.json("neurons.json", _clean(doc))
    if ds.labels():
        rows = []
        for j in range(acts.shape[1]):
            rows.extend(genre_activation_profile(acts, ds.item_metadata, neuron=j))
        out.text("neuron_profiles.csv", rows_to_csv(rows, ["neuron", "label", "n_items", "mean_activation"]))
    n_lab = 0 if labels is None else len(labels)
    print(f"exported top items for {len(reports)} neurons ({n_lab} labelled)")
    return {"inputs": inputs, "config": {"ks": ks, "top_t": top_t}, "seed": sae_cfg.seed}


FIDELITY_KEYS = ("depth", "p", "n_users", "seed")


def cmd_fidelity(args, out: Outputs) -> dict:
    sec = _override(_section(args, "fidelity", FIDELITY_KEYS), depth=args.depth, n_users=args.n_users)
    seed = _seed(args, sec)
    depth, p = int(sec.get("depth", 30)), float(sec.get("p", 0.9))
    ds_path = _need(args.dataset, "dataset")
    model = _load_recommender(args.recommender, ds_path)
    bundle, _ = _load_sae(args.sae, model)
    users = None
    if sec.get("n_users") is not None and int(sec["n_users"]) < model.n_users:
        users = np.sort(make_rng(seed).choice(model.n_users, size=int(sec["n_users"]), replace=False))
    levels = [None] if len(bundle.user.level_sizes) == 1 else list(range(1, len(bundle.user.level_sizes) + 1))
    summary, per_user = [], []
    for level in levels:
        res = evaluate_fidelity(model, bundle, users, depth, p, level)
        size = bundle.user.m if level is None else bundle.user.level_sizes[level - 1]
        summary.append({"level": level, "latents": size, "rbo_mean": res.rbo_mean, "rbo_std": res.rbo_std,
                        "tau_mean": res.tau_mean, "tau_std": res.tau_std})
        if level is None or level == levels[-1]:
            for u, r, t, s in zip(res.users, res.rbo, res.kendall_tau, res.shared):
                per_user.append({"user": int(u), "rbo": float(r), "kendall_tau": float(t), "shared": int(s)})
    out.json("fidelity.json", _clean({"seed": seed, "depth": depth, "p": p, "levels": summary}))
    out.text("fidelity_users.csv", rows_to_csv(per_user, ["user", "rbo", "kendall_tau", "shared"]))
    top = summary[-1]
    print(f"RBO {top['rbo_mean']:.4f} +- {top['rbo_std']:.4f}, Kendall tau {top['tau_mean']:.4f}")
    return {"inputs": {"dataset": ds_path, "recommender": Path(args.recommender), "sae": Path(args.sae)},
            "config": {"depth": depth, "p": p, "n_users": sec.get("n_users")}, "seed": seed}


SWEEP_KEYS = ("betas", "seeds", "n_users", "depth", "p", "top_t")


def cmd_sweep(args, out: Outputs) -> dict:
    sec = _override(_section(args, "sweep", SWEEP_KEYS), betas=_float_list(args.betas), seeds=_int_list(args.seeds))
    seed = _seed(args, args.config_doc.get("sae", {}))
    base = _sae_config(args, seed)
    betas = [float(b) for b in sec.get("betas", [0.0, 1.0, 10.0])]
    seeds = [int(s) for s in sec.get("seeds", [seed])]
    if not betas or any(b < 0 for b in betas):
        raise ConfigError("beta values must be a non-empty list of non-negative numbers")
    ds_path = _need(args.dataset, "dataset")
    ds = _load_dataset(ds_path)
    model = _load_recommender(args.recommender, ds_path)
    try:
        rows = beta_sweep(ds, model, betas, base, seeds, sec.get("n_users"), int(sec.get("depth", 30)),
                          float(sec.get("p", 0.9)), int(sec.get("top_t", 30)))
    except RuntimeError as exc:
        if isinstance(exc.__cause__, TrainingError):
            raise TrainingError(str(exc)) from exc
        raise
    out.text("sweep.csv", sweep_csv(rows))
    out.json("sweep.json", _clean({"seed": seed, "base_config": base.to_json(), "rows": rows}))
    print(f"swept {len(betas)} beta values over {len(seeds)} seeds")
    return {"inputs": {"dataset": ds_path, "recommender": Path(args.recommender)},
            "config": {"betas": betas, "seeds": seeds, "base": base.to_json()}, "seed": seed}


INTERVENE_KEYS = ("values", "top_n", "label", "all_reconstructed")


def cmd_intervene(args, out: Outputs) -> dict:
    sec = _override(_section(args, "intervene", INTERVENE_KEYS), values=_float_list(args.values), top_n=args.top_n,
                    label=args.label, all_reconstructed=args.all_reconstructed or None)
    ds_path = _need(args.dataset, "dataset")
    ds = _load_dataset(ds_path)
    model = _load_recommender(args.recommender, ds_path)
    bundle, sae_cfg = _load_sae(args.sae, model)
    spec_path = _need(args.spec, "spec")
    try:
        spec = InterventionSpec.from_json(read_json(spec_path))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{spec_path}: malformed intervention spec ({exc})")
    if spec.side not in ("user", "item"):
        raise ConfigError("intervention target side must be 'user' or 'item'")
    limit = model.n_items if spec.side == "item" else model.n_users
    if not 0 <= spec.entity < limit:
        raise ConfigError(f"target {spec.side} {spec.entity} out of range (0..{limit - 1})")
    for e in spec.edits:
        if not 0 <= e.neuron < bundle.for_side(spec.side).m:
            raise ConfigError(f"edit neuron {e.neuron} out of range for m={bundle.for_side(spec.side).m}")
    n = int(sec.get("top_n", 30 if spec.side == "item" else 10))
    all_rec = bool(sec.get("all_reconstructed", False))
    segments = resolve_audience(spec.audience, ds, model.n_users)
    report = {"spec": spec.to_json(), "top_n": n, "all_reconstructed": all_rec, "seed": sae_cfg.seed}

    if spec.side == "item":
        if len(spec.edits) != 1:
            raise ConfigError("an item promotion sweep takes exactly one edit naming the neuron and mode")
        edit = spec.edits[0]
        values = sec.get("values") or [edit.value]
        traj = promotion_sweep(bundle, model, spec.entity, edit.neuron, values, segments, n, edit.mode, all_rec)
        out.text("trajectory.csv", trajectory_csv(traj))
        report["trajectory"] = traj.rows
        for name in segments:
            ranks = traj.mean_ranks(name)
            if ranks and ranks[0] is not None:
                print(f"{name}: mean rank {ranks[0]:.2f} -> {ranks[-1]:.2f}")
    else:
        cohort = [spec.entity] if spec.audience.get("kind", "all") == "all" else sorted({u for us in segments.values() for u in us})
        items_t = reconstructed_tables(model, bundle)[1] if all_rec else model.item_embeddings
        rows = []
        for u in cohort:
            z = encode(bundle.user, model.user_embeddings[u])
            before = rank_order(score_items(model, decode(bundle.user, z), items_t))[:n]
            after = rank_order(score_items(model, decode(bundle.user, edit_latent(z, spec.edits)), items_t))[:n]
            rows.append({"user": ds.user_ids[u], "before": [ds.item_ids[i] for i in before],
                         "after": [ds.item_ids[i] for i in after]})
        report["top_lists"] = rows
        if sec.get("label"):
            exp = cohort_exposure(bundle, model, cohort, spec.edits, sec["label"], ds, n, all_rec)
            report["exposure"] = {k: v for k, v in exp.items() if k != "per_user"}
            print(f"{sec['label']} items in top-{n}: {exp['before']} -> {exp['after']} ({exp['reduction']:.0%} fewer)")
    out.json("intervention_report.json", _clean(report))
    return {"inputs": {"dataset": ds_path, "recommender": Path(args.recommender), "sae": Path(args.sae), "spec": spec_path},
            "config": _clean(sec), "seed": sae_cfg.seed}


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train-rec": cmd_train_rec,
    "train-sae": cmd_train_sae,
    "analyze": cmd_analyze,
    "fidelity": cmd_fidelity,
    "sweep": cmd_sweep,
    "intervene": cmd_intervene,
}


# --- argument parsing ----------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON config with per-command sections")
    p.add_argument("--seed", type=int, default=d(None), help="overrides every seed in the config")
    p.add_argument("--out", default=d("."), help="output directory (default: current directory)")
    p.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recsae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"recsae {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("prepare", "index and split a raw interaction file")
    p.add_argument("--ratings", help="ratings.dat (movielens) or listening-event TSV (lastfm)")
    p.add_argument("--format", choices=["movielens", "lastfm"])
    p.add_argument("--movies", help="MovieLens movies.dat for titles, genres and years")
    p.add_argument("--metadata", help="TSV sidecar: item_id, title, labels separated by '|', year")

    p = add("synth", "generate a planted-concept dataset with ground truth")
    p.add_argument("--n-users", type=int)
    p.add_argument("--n-items", type=int)
    p.add_argument("--n-concepts", type=int)
    p.add_argument("--noise", type=float)

    p = add("train-rec", "train an MF or NCF recommender")
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=["MF", "NCF"])
    p.add_argument("--epochs", type=int)

    p = add("train-sae", "fit an SAE on a frozen recommender")
    p.add_argument("--dataset")
    p.add_argument("--recommender")
    p.add_argument("--m", type=int, help="bottleneck width")
    p.add_argument("--levels", type=int, help="number of nested levels")
    p.add_argument("--beta", type=float, help="weight of the prediction loss")
    p.add_argument("--epochs", type=int)

    p = add("analyze", "export top items per neuron and label purity")
    p.add_argument("--dataset")
    p.add_argument("--recommender")
    p.add_argument("--sae")
    p.add_argument("--labels", help="optional TSV of neuron_index<TAB>label")
    p.add_argument("--ks", help="comma-separated purity depths (default 10,20,50)")
    p.add_argument("--top-t", type=int, help="top items used by the monosemanticity score")

    p = add("fidelity", "compare original and reconstructed rankings")
    p.add_argument("--dataset")
    p.add_argument("--recommender")
    p.add_argument("--sae")
    p.add_argument("--depth", type=int)
    p.add_argument("--n-users", type=int, help="evaluate a random subset of users")

    p = add("sweep", "train SAEs over a grid of beta values and seeds")
    p.add_argument("--dataset")
    p.add_argument("--recommender")
    p.add_argument("--betas", help="comma-separated beta values")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--m", type=int)
    p.add_argument("--epochs", type=int)

    p = add("intervene", "edit latent units and report rank changes")
    p.add_argument("--dataset")
    p.add_argument("--recommender")
    p.add_argument("--sae")
    p.add_argument("--spec", help="intervention/1 JSON document")
    p.add_argument("--values", help="comma-separated sweep values for item promotion")
    p.add_argument("--top-n", type=int)
    p.add_argument("--label", help="count items with this label before and after (user edits)")
    p.add_argument("--all-reconstructed", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = Outputs(Path(args.out))
    t0 = time.perf_counter()
    try:
        args.config_doc = load_config(args.config)
        rec = COMMANDS[args.command](args, out)
        write_manifest(out.dir, args.command, rec["inputs"], out.written, _clean(rec["config"]), rec["seed"],
                       time.perf_counter() - t0)
        return EXIT_OK
    except (ConfigError, FingerprintError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (DataFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except (TrainingError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except ValueError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    out.cleanup(args.command)
    print(f"recsae {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
