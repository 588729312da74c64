"""Command-line entry point: ingest, train, evaluate, recommend, augment-preview, synth."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .augment import NeighborIndex, Technique, augment_item_asset, element_rng
from .data import (
    Catalog,
    Item,
    chronological_split,
    filter_corpus,
    id_map_digest,
    load_id_map,
    load_catalog,
    load_sessions,
    save_id_map,
    save_sessions,
    write_pnm,
)
from .embedders import TextExtractor, build_embedders, read_features, write_features
from .errors import ConfigError, MACLError
from .synth import SyntheticSpec, generate_synthetic
from .training import (
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    recommend,
    stratified_evaluate,
    train,
    training_popularity,
    write_loss_log,
    write_metrics,
)

log = logging.getLogger("macl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    data_digests: dict[str, str]
    code_version: str
    started: float
    finished: float = 0.0
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, path) -> None:
        self.finished = time.time()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_version() -> str:
    h = hashlib.sha256(__version__.encode())
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def apply_thread_cap() -> None:
    raw = os.environ.get("MACL_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MACL_THREADS must be an integer, got {raw!r}") from None
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:
        pass
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


# -- shared helpers -------------------------------------------------------------
def _k_list(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k needs positive integers")
    return ks


def _load_config(args) -> TrainConfig:
    overrides = {}
    for key in ("seed", "epochs", "d", "lr", "N", "M", "lam"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    for key in ("no_item_cl", "no_sess_cl", "no_adaptive", "legacy_aug", "keep_unpopular"):
        if getattr(args, key, False):
            overrides[key] = True
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**overrides)


def _prepare(catalog_path, sessions_path, cfg: TrainConfig):
    catalog = load_catalog(catalog_path)
    sessions = load_sessions(sessions_path, catalog)
    sessions, catalog = filter_corpus(sessions, catalog, cfg.min_item_count, cfg.keep_unpopular)
    return catalog, sessions, chronological_split(sessions)


def _load_checkpoint(args):
    expected = id_map_digest(load_id_map(args.id_map)) if args.id_map else None
    return checkpoint_load(args.checkpoint, id_map_digest_expected=expected)


def _catalog_from_ids(external_ids) -> Catalog:
    return Catalog([Item(i, ext) for i, ext in enumerate(external_ids)])


def _features(features_dir, catalog: Catalog):
    """Cached native features keyed by filtered dense id (ingest writes them that way)."""
    if not features_dir:
        return None, None
    out = {}
    for kind in ("image", "text"):
        path = Path(features_dir) / f"{kind}.feat"
        out[kind] = read_features(path)[2] if path.exists() else None
    return out["image"], out["text"]


# -- subcommands ----------------------------------------------------------------
def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_items=args.n_items,
        n_groups=args.n_groups,
        sessions=args.sessions,
        p_stay=args.p_stay,
        popularity_exponent=args.exponent,
        seed=args.seed,
    )
    out = Path(args.out)
    manifest = RunManifest("synth", asdict(spec), args.seed, {}, code_version(), time.time())
    data = generate_synthetic(spec, out)
    cat, sess = out / "catalog.jsonl", out / "sessions.jsonl"
    manifest.data_digests = {"catalog": file_digest(cat), "sessions": file_digest(sess)}
    manifest.outputs = {"catalog": str(cat), "sessions": str(sess), "images": str(out / "images")}
    manifest.write(out / "manifest.json")
    print(f"wrote {len(data.catalog)} items and {len(data.sessions)} sessions to {out}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        "ingest",
        cfg.to_dict(),
        cfg.seed,
        {"catalog": file_digest(args.catalog), "sessions": file_digest(args.sessions)},
        code_version(),
        time.time(),
    )
    catalog, sessions, splits = _prepare(args.catalog, args.sessions, cfg)
    save_id_map(catalog.external_ids, out / "id_map.csv")
    outputs = {"id_map": str(out / "id_map.csv")}
    for name in ("train", "validation", "test"):
        path = out / f"{name}.jsonl"
        save_sessions(getattr(splits, name), catalog, path)
        outputs[name] = str(path)
    emb = build_embedders(catalog, cfg.d, cfg.projector, cfg.seed)
    for kind, modality in (("image", emb.image), ("text", emb.text)):
        if modality is None:
            continue
        feats = {}
        for it in catalog:
            asset = it.image if kind == "image" else it.text
            if asset is not None:
                feats[it.item_id] = modality.features(asset)
        path = out / f"{kind}.feat"
        write_features(path, kind, feats)
        outputs[f"{kind}_features"] = str(path)
    manifest.outputs = outputs
    manifest.write(out / "manifest.json")
    print(
        f"{len(catalog)} items, {len(sessions)} sessions "
        f"(train {len(splits.train)}, validation {len(splits.validation)}, test {len(splits.test)}); "
        f"id_map digest {id_map_digest(catalog.external_ids)[:16]}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        "train",
        cfg.to_dict(),
        cfg.seed,
        {"catalog": file_digest(args.catalog), "sessions": file_digest(args.sessions)},
        code_version(),
        time.time(),
    )
    catalog, _, splits = _prepare(args.catalog, args.sessions, cfg)
    img_feats, txt_feats = _features(args.features, catalog)
    emb = build_embedders(catalog, cfg.d, cfg.projector, cfg.seed, img_feats, txt_feats)
    result = train(cfg, splits, catalog, emb)
    model = result.model
    paths = {
        "checkpoint": out / "checkpoint.bin",
        "loss_log": out / "loss_log.csv",
        "metrics": out / "metrics.csv",
        "config": out / "run.cfg",
    }
    checkpoint_save(model, paths["checkpoint"])
    write_loss_log(result.loss_log, paths["loss_log"])
    rows = []
    for name in ("validation", "test"):
        sessions = getattr(splits, name)
        if sessions:
            rows += evaluate(model, sessions, cfg.k_list).rows(name)
    write_metrics(rows, paths["metrics"])
    paths["config"].write_text(cfg.to_text())
    manifest.data_digests["id_map"] = model.id_digest
    manifest.outputs = {k: str(v) for k, v in paths.items()}
    manifest.write(out / "manifest.json")
    for r in rows:
        print(f"{r['split']:<10} Prec@{r['k']:<3} {r['precision']:.4f}  MRR@{r['k']:<3} {r['mrr']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    ks = _k_list(args.k)
    model = _load_checkpoint(args)
    catalog = _catalog_from_ids(model.external_ids)
    sessions = [s for s in load_sessions(args.sessions, catalog) if len(s) >= 2]
    rows = evaluate(model, sessions, ks).rows(args.split)
    if args.stratify:
        bounds = [float(b) for b in args.boundaries.split(",")]
        popularity = None
        if args.stratify == "item_popularity":
            if not args.train_sessions:
                raise UsageError("--stratify item_popularity needs --train-sessions")
            popularity = training_popularity(load_sessions(args.train_sessions, catalog))
        for stratum, rep in stratified_evaluate(model, sessions, args.stratify, bounds, ks, popularity):
            if rep is None:
                rows += [{"split": args.split, "group": stratum.name, "k": k, "precision": None, "mrr": None, "count": 0} for k in ks]
            else:
                rows += rep.rows(args.split, stratum.name)
    out = Path(args.out)
    write_metrics(rows, out)
    manifest = RunManifest(
        "evaluate",
        {"k": list(ks), "stratify": args.stratify, "boundaries": args.boundaries},
        model.config.seed,
        {"checkpoint": file_digest(args.checkpoint), "sessions": file_digest(args.sessions)},
        code_version(),
        time.time(),
        outputs={"metrics": str(out)},
    )
    manifest.write(out.with_name(out.stem + ".manifest.json"))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["split", "group", "k", "precision", "mrr", "count"])
    for r in rows:
        w.writerow([r["split"], r["group"], r["k"], r["precision"], r["mrr"], r["count"]])
    return 0


def cmd_recommend(args) -> int:
    model = _load_checkpoint(args)
    prefix = [x.strip() for x in args.session.split(",") if x.strip()]
    recs = recommend(model, prefix, args.k, exclude_seen=True if args.exclude_seen else None)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "item_id", "probability"])
    for rank, (item, p) in enumerate(recs, start=1):
        w.writerow([rank, item, repr(p)])
    return 0


def cmd_augment_preview(args) -> int:
    catalog = load_catalog(args.catalog)
    item = catalog[catalog.dense(args.item)]
    tech = Technique.parse(args.technique)
    neighbors = None
    if tech.modality == "text":
        neighbors = NeighborIndex.from_catalog(catalog, TextExtractor(), 5)
    aug = augment_item_asset(item, tech, element_rng(args.seed, item.item_id), neighbors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{item.external_id}"
    if tech.modality == "image":
        ext = "ppm" if item.image.channels == 3 else "pgm"
        orig, new = out / f"{stem}.{ext}", out / f"{stem}.{tech.value}.{ext}"
        orig.write_bytes(write_pnm(item.image))
        new.write_bytes(write_pnm(aug))
    else:
        orig, new = out / f"{stem}.txt", out / f"{stem}.{tech.value}.txt"
        orig.write_text(" ".join(item.text.tokens) + "\n")
        new.write_text(" ".join(aug.tokens) + "\n")
    print(f"{orig}\n{new}")
    return 0


# -- parser ------------------------------------------------------------------
def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="N", type=int)
    p.add_argument("--negatives", dest="M", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--no-item-cl", action="store_true")
    p.add_argument("--no-sess-cl", action="store_true")
    p.add_argument("--no-adaptive", action="store_true")
    p.add_argument("--legacy-aug", action="store_true")
    p.add_argument("--keep-unpopular", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="macl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic catalog and session log")
    p.add_argument("--out", required=True)
    p.add_argument("--n-items", type=int, default=200)
    p.add_argument("--n-groups", type=int, default=10)
    p.add_argument("--sessions", type=int, default=5000)
    p.add_argument("--p-stay", type=float, default=0.8)
    p.add_argument("--exponent", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="filter, split and cache features")
    p.add_argument("--catalog", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train and write checkpoint, logs, metrics, manifest")
    p.add_argument("--catalog", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="directory with image.feat / text.feat written by ingest")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="write metrics.csv for a session file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id-map", help="id_map.csv from ingest; refuse checkpoints trained on another catalog")
    p.add_argument("--sessions", required=True)
    p.add_argument("--k", default="10,20")
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--split", default="test")
    p.add_argument("--stratify", choices=("session_length", "item_popularity"))
    p.add_argument("--boundaries", default="4")
    p.add_argument("--train-sessions", help="training sessions, for popularity strata")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-k items for a session prefix, as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id-map", help="id_map.csv from ingest; refuse checkpoints trained on another catalog")
    p.add_argument("--session", required=True, help="comma-separated external item ids")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--exclude-seen", action="store_true")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("augment-preview", help="write one augmented asset beside its original")
    p.add_argument("--catalog", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--technique", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="preview")
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        apply_thread_cap()
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (MACLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
