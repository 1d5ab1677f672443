"""Operator entry point: reproducible experiment pipelines over the library.

Every subcommand writes exactly its declared artifacts plus a ``.meta`` run
record (config echo, seed, package version, input content hashes). All
randomness flows from an explicit ``--seed``; reruns with identical inputs
produce byte-identical primary artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .activations import read_activation_header, write_activation_file
from .emd import emd_vdna
from .encoder import (
    KIND_NEURON_CONCAT,
    EncoderConfig,
    EncoderParams,
    project_head,
    encode_vdna,
)
from .errors import FormatError, VdnaError
from .pipeline import load_frames, pool_from_manifest, split_pool_by_group, window_vdnas
from .retrieval import (
    DescriptorDb,
    build_db,
    format_report,
    layer_sweep,
    load_db,
    merge_dbs,
    recall_at_n,
    save_db,
    save_report,
)
from .spec import calibrate_spec, load_spec, save_spec
from .training import MiningConfig, TrainConfig, mine_and_train, pool_from_vdnas
from .vdna import load_vdna, normalize, save_vdna
from .world import (
    SequenceRecord,
    SyntheticWorldConfig,
    Threshold,
    generate_world,
    load_manifest,
    save_manifest,
    split_manifest,
)

META_HEADER = "VPR-RUNMETA v1"
WINDOWS_HEADER = "VDNA-WINDOWS v1"
SWEEP_HEADER = "VPR-SWEEP v1"

OUT_ROOT_ENV = "VDNAVPR_OUT"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_meta(meta_path: Path, command: str, config: dict, inputs: list[Path], outputs: list[Path]) -> None:
    lines = [META_HEADER, f"command {command}", f"package vdnavpr {__version__}"]
    for key in sorted(config):
        lines.append(f"config {key} {config[key]}")
    for p in inputs:
        lines.append(f"input {p.name} sha256 {_sha256(p)}")
    for p in outputs:
        lines.append(f"output {p.name}")
    meta_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(args, command: str) -> Path:
    if args.out_dir is not None:
        path = Path(args.out_dir)
    else:
        root = os.environ.get(OUT_ROOT_ENV)
        if root is None:
            raise VdnaError(f"--out-dir not given and ${OUT_ROOT_ENV} is unset")
        path = Path(root) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_threshold(text: str) -> Threshold:
    text = text.strip()
    if text.endswith("m"):
        return Threshold.meters(float(text[:-1]))
    if text.endswith("f"):
        return Threshold.frames(float(text[:-1]))
    return Threshold.meters(float(text))


def _parse_layer_set(text: str) -> tuple[int, ...]:
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in text.split(","))


def _window_file_name(window_id: str) -> str:
    return window_id.replace(":", "_").replace("/", "_") + ".vdna"


def _write_windows_index(path: Path, records: list[SequenceRecord]) -> None:
    lines = [WINDOWS_HEADER, f"count {len(records)}"]
    lines.append("columns window_id traversal_id x y center_pos file frames")
    for rec in records:
        frames = ",".join(rec.frame_ids)
        lines.append(
            f"{rec.window_id} {rec.traversal_id} {rec.x!r} {rec.y!r} {rec.center_pos} "
            f"{_window_file_name(rec.window_id)} {frames}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_windows_index(path: Path) -> list[tuple[SequenceRecord, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != WINDOWS_HEADER:
        raise FormatError(f"not a windows index: expected header {WINDOWS_HEADER!r}")
    count = int(lines[1].split()[1])
    out = []
    for ln in lines[3 : 3 + count]:
        window_id, traversal_id, x, y, center, fname, frames = ln.split()
        rec = SequenceRecord(
            window_id, traversal_id, tuple(frames.split(",")), float(x), float(y), int(center)
        )
        out.append((rec, fname))
    return out


def cmd_synth(args) -> int:
    out = _out_dir(args, "synth")
    config = SyntheticWorldConfig(
        seed=args.seed,
        places=args.places,
        traversals=args.traversals,
        step=args.step,
        appearance_scale=args.appearance_scale,
        frame_noise_scale=args.frame_noise,
        sample_noise_scale=args.sample_noise,
        layers=args.layers,
        neurons_per_layer=args.neurons,
        samples_per_neuron=args.samples,
        loc_radius=args.loc_radius,
    )
    manifest, source = generate_world(config)
    manifest_path = out / "world.manifest"
    vact_path = out / "activations.vact"
    save_manifest(manifest_path, manifest)
    write_activation_file(vact_path, source.layer_shapes(), iter(source))
    _write_meta(
        out / "synth.meta",
        "synth",
        {
            "seed": args.seed,
            "places": args.places,
            "traversals": args.traversals,
            "step": args.step,
            "appearance_scale": args.appearance_scale,
            "frame_noise": args.frame_noise,
            "sample_noise": args.sample_noise,
            "layers": args.layers,
            "neurons": args.neurons,
            "samples": args.samples,
            "loc_radius": config.threshold.value,
            "threads": args.threads,
        },
        [],
        [manifest_path, vact_path],
    )
    print(f"synth: {len(manifest.frames)} frames -> {out}")
    return 0


def cmd_calibrate(args) -> int:
    vact = Path(args.activations)
    shapes = read_activation_header(vact)
    topology = tuple((i + 1, s.neurons) for i, s in enumerate(shapes))
    from .activations import read_activation_file

    spec = calibrate_spec(read_activation_file(vact), topology, bins=args.bins, expansion=args.expansion)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_spec(out_path, spec)
    _write_meta(
        out_path.with_suffix(out_path.suffix + ".meta"),
        "calibrate",
        {"bins": args.bins, "expansion": args.expansion, "seed": "n/a", "threads": args.threads},
        [vact],
        [out_path],
    )
    print(f"calibrate: {spec.total_neurons} neurons x {spec.bins} bins, spec_id {spec.spec_id.hex()}")
    return 0


def cmd_accumulate(args) -> int:
    out = _out_dir(args, "accumulate")
    manifest = load_manifest(Path(args.manifest))
    if args.traversals:
        keep = set(args.traversals.split(","))
        missing = keep - {f.traversal_id for f in manifest.frames}
        if missing:
            raise VdnaError(f"manifest has no traversal(s) {sorted(missing)}")
        manifest = type(manifest)(
            tuple(f for f in manifest.frames if f.traversal_id in keep),
            manifest.threshold,
            manifest.domain_tag,
        )
    spec = load_spec(Path(args.spec))
    frames = load_frames(Path(args.activations))
    records, vdnas = window_vdnas(
        manifest, frames, spec, seq_len=args.seq_len, stride=args.stride, sample_cap=args.sample_cap
    )
    outputs = []
    for rec, vdna in zip(records, vdnas):
        path = out / _window_file_name(rec.window_id)
        save_vdna(path, vdna)
        outputs.append(path)
    index_path = out / "windows.txt"
    _write_windows_index(index_path, records)
    _write_meta(
        out / "accumulate.meta",
        "accumulate",
        {
            "seq_len": args.seq_len,
            "stride": args.stride,
            "sample_cap": args.sample_cap,
            "traversals": args.traversals or "all",
            "seed": "n/a",
            "threads": args.threads,
        },
        [Path(args.manifest), Path(args.spec), Path(args.activations)],
        [index_path, *outputs],
    )
    print(f"accumulate: {len(records)} window VDNAs -> {out}")
    return 0


def cmd_emd(args) -> int:
    spec = load_spec(Path(args.spec))
    a = normalize(load_vdna(Path(args.vdna_a), spec))
    b = normalize(load_vdna(Path(args.vdna_b), spec))
    print(repr(emd_vdna(a, b, spec)))
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args, "train")
    manifest = load_manifest(Path(args.manifest))
    spec = load_spec(Path(args.spec))
    frames = load_frames(Path(args.activations))

    val = None
    train_manifest = manifest
    if args.val_fraction > 0:
        train_manifest, val_manifest = split_manifest(manifest, args.val_fraction)
        val_pool = pool_from_manifest(
            val_manifest, frames, spec, args.seq_len, args.stride, args.sample_cap
        )
        groups = sorted(set(val_pool.groups))
        if len(groups) >= 2 and len(val_pool):
            val = split_pool_by_group(val_pool, groups[0])
        else:
            print("train: validation split has fewer than two traversals; skipping val", file=sys.stderr)
    pool = pool_from_manifest(train_manifest, frames, spec, args.seq_len, args.stride, args.sample_cap)

    encoder_config = EncoderConfig(bins=spec.bins, embed_dim=args.embed_dim, head_dim=args.head_dim)
    mining = MiningConfig(
        cache_queries=args.cache_queries,
        cache_negatives=args.cache_negatives,
        hardest_carryover=args.carryover,
        refresh_every=args.refresh_every,
        negatives_per_triplet=args.negatives,
    )
    train_cfg = TrainConfig(
        margin=args.margin,
        lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        refreshes_per_epoch=args.refreshes_per_epoch,
        batch_triplets=args.batch_triplets,
        seed=args.seed,
    )
    params, log = mine_and_train(pool, spec, manifest.threshold, encoder_config, mining, train_cfg, val=val)
    ckpt_path = out / "checkpoint.vprw"
    params.save(ckpt_path)
    log_path = out / "train_log.txt"
    log_path.write_text(log.to_text(), encoding="utf-8")
    _write_meta(
        out / "train.meta",
        "train",
        {
            "seq_len": args.seq_len,
            "stride": args.stride,
            "margin": args.margin,
            "lr": args.lr,
            "weight_decay": args.weight_decay,
            "epochs": args.epochs,
            "refreshes_per_epoch": args.refreshes_per_epoch,
            "batch_triplets": args.batch_triplets,
            "cache_queries": args.cache_queries,
            "cache_negatives": args.cache_negatives,
            "carryover": args.carryover,
            "refresh_every": args.refresh_every,
            "negatives": args.negatives,
            "embed_dim": args.embed_dim,
            "head_dim": args.head_dim,
            "val_fraction": args.val_fraction,
            "sample_cap": args.sample_cap,
            "seed": args.seed,
            "threads": args.threads,
        },
        [Path(args.manifest), Path(args.spec), Path(args.activations)],
        [ckpt_path, log_path],
    )
    print(f"train: {log.consumed_total} triplets over {log.refresh_count} refreshes -> {ckpt_path}")
    return 0


def _load_window_vdnas(vdna_dir: Path, spec):
    entries = _read_windows_index(vdna_dir / "windows.txt")
    records = [rec for rec, _ in entries]
    vdnas = [normalize(load_vdna(vdna_dir / fname, spec)) for _, fname in entries]
    return records, vdnas


def cmd_encode(args) -> int:
    spec = load_spec(Path(args.spec))
    params, _, _ = EncoderParams.load(Path(args.checkpoint))
    if params.spec_id != spec.spec_id:
        raise VdnaError("checkpoint was trained against a different spec")
    records, vdnas = _load_window_vdnas(Path(args.vdnas), spec)

    selection = None
    if args.selection != "all":
        kind, _, rest = args.selection.partition(":")
        if kind == "layer":
            selection = spec.neurons_for_layers([int(rest)])
        elif kind == "layers":
            selection = spec.neurons_for_layers(_parse_layer_set(rest))
        else:
            raise VdnaError(f"bad --selection {args.selection!r}; use all, layer:K, or layers:A:B")

    descriptors = []
    for nv in vdnas:
        full = encode_vdna(nv, params, selection)
        descriptors.append(project_head(full, params) if args.head else full)
    db = build_db(descriptors, records)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_db(out_path, db)
    _write_meta(
        out_path.with_suffix(out_path.suffix + ".meta"),
        "encode",
        {"selection": args.selection, "head": args.head, "seed": "n/a", "threads": args.threads},
        [Path(args.spec), Path(args.checkpoint), Path(args.vdnas) / "windows.txt"],
        [out_path],
    )
    print(f"encode: {len(db)} descriptors of length {db.dim} -> {out_path}")
    return 0


def cmd_index(args) -> int:
    dbs = [load_db(Path(p)) for p in args.inputs]
    merged = merge_dbs(dbs)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_db(out_path, merged)
    _write_meta(
        out_path.with_suffix(out_path.suffix + ".meta"),
        "index",
        {"inputs": len(dbs), "seed": "n/a", "threads": args.threads},
        [Path(p) for p in args.inputs],
        [out_path],
    )
    print(f"index: {len(merged)} descriptors -> {out_path}")
    return 0


def _plot_sweep(entries, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - depends on extras
        raise VdnaError("--plot needs matplotlib (install the 'plot' extra)") from exc
    labels = [e.label for e in entries]
    r1 = [e.report.recalls[min(e.report.recalls)] for e in entries]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(entries)), r1, marker="o")
    ax.set_xticks(range(len(entries)), labels, rotation=45, ha="right")
    ax.set_ylabel("Recall@1 (%)")
    ax.set_xlabel("layer selection")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval(args) -> int:
    ns = [int(v) for v in args.n.split(",")]
    threshold = _parse_threshold(args.threshold)
    if args.sweep:
        if not (args.spec and args.checkpoint and args.db_vdnas and args.query_vdnas):
            raise VdnaError("--sweep needs --spec, --checkpoint, --db-vdnas, --query-vdnas")
        spec = load_spec(Path(args.spec))
        params, _, _ = EncoderParams.load(Path(args.checkpoint))
        db_records, db_vdnas = _load_window_vdnas(Path(args.db_vdnas), spec)
        q_records, q_vdnas = _load_window_vdnas(Path(args.query_vdnas), spec)
        layer_sets = (
            [_parse_layer_set(s) for s in args.layer_sets.split()] if args.layer_sets else None
        )
        entries = layer_sweep(
            spec, params, db_vdnas, db_records, q_vdnas, q_records, ns, threshold, layer_sets
        )
        lines = [SWEEP_HEADER, f"threshold {threshold.kind} {threshold.value!r}"]
        lines.append("columns label layers length " + " ".join(f"recall@{n}" for n in sorted(set(ns))))
        for e in entries:
            recalls = " ".join(f"{e.report.recalls[n]:.4f}" for n in sorted(e.report.recalls))
            layers_txt = ",".join(str(v) for v in e.layer_indexes)
            lines.append(f"{e.label} {layers_txt} {e.descriptor_length} {recalls}")
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        if args.plot:
            _plot_sweep(entries, Path(args.plot))
        inputs = [Path(args.spec), Path(args.checkpoint)]
        print(f"eval sweep: {len(entries)} selections -> {out_path}")
    else:
        if not (args.db and args.queries):
            raise VdnaError("eval needs --db and --queries (or --sweep)")
        db = load_db(Path(args.db))
        queries = load_db(Path(args.queries))
        if queries.dim != db.dim or queries.kind != db.kind:
            raise VdnaError("query and database descriptors disagree in dim or kind")
        report = recall_at_n(db, queries.matrix, queries.records, ns, threshold)
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_report(out_path, report)
        recalls = ", ".join(f"R@{n}={report.recalls[n]:.2f}" for n in sorted(report.recalls))
        inputs = [Path(args.db), Path(args.queries)]
        print(f"eval: {recalls} ({report.eligible} eligible queries) -> {out_path}")
    _write_meta(
        out_path.with_suffix(out_path.suffix + ".meta"),
        "eval",
        {"n": args.n, "threshold": args.threshold, "sweep": args.sweep, "seed": "n/a", "threads": args.threads},
        inputs,
        [out_path],
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdnavpr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vdnavpr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--threads", type=int, default=1, help="worker cap (the pipeline is sequential; any value reproduces identical results)")

    p = sub.add_parser("synth", help="generate a synthetic world (manifest + activations)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--places", type=int, default=200)
    p.add_argument("--traversals", type=int, default=2)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--appearance-scale", type=float, default=1.0)
    p.add_argument("--frame-noise", type=float, default=0.3)
    p.add_argument("--sample-noise", type=float, default=0.05)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--neurons", type=int, default=16)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--loc-radius", type=float, default=None)
    p.add_argument("--out-dir", default=None)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="derive a histogram spec from activations")
    p.add_argument("--activations", required=True)
    p.add_argument("--bins", type=int, default=500)
    p.add_argument("--expansion", type=float, default=0.01)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("accumulate", help="build per-window VDNAs")
    p.add_argument("--activations", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seq-len", type=int, default=5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--sample-cap", type=int, default=256)
    p.add_argument("--traversals", default=None, help="comma-separated traversal ids to keep")
    p.add_argument("--out-dir", default=None)
    common(p)
    p.set_defaults(func=cmd_accumulate)

    p = sub.add_parser("emd", help="earth mover's distance between two VDNA files")
    p.add_argument("vdna_a")
    p.add_argument("vdna_b")
    p.add_argument("--spec", required=True)
    common(p)
    p.set_defaults(func=cmd_emd)

    p = sub.add_parser("train", help="train the encoder with mined triplets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--activations", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--seq-len", type=int, default=5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--refreshes-per-epoch", type=int, default=2)
    p.add_argument("--batch-triplets", type=int, default=4)
    p.add_argument("--cache-queries", type=int, default=1000)
    p.add_argument("--cache-negatives", type=int, default=5000)
    p.add_argument("--carryover", type=int, default=500)
    p.add_argument("--refresh-every", type=int, default=1500)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--embed-dim", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--sample-cap", type=int, default=256)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode window VDNAs into a descriptor db")
    p.add_argument("--vdnas", required=True, help="directory produced by accumulate")
    p.add_argument("--spec", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--selection", default="all", help="all | layer:K | layers:A:B")
    p.add_argument("--head", action="store_true", help="apply the projection head")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="merge descriptor db shards")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("eval", help="Recall@N evaluation (optionally a per-layer sweep)")
    p.add_argument("--db", default=None)
    p.add_argument("--queries", default=None)
    p.add_argument("--n", default="1,5,10")
    p.add_argument("--threshold", required=True, help="e.g. 25m (meters) or 2f (frames)")
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--spec", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--db-vdnas", default=None)
    p.add_argument("--query-vdnas", default=None)
    p.add_argument("--layer-sets", default=None, help="space-separated sets, each like 12 or 9:12 or 1,3")
    p.add_argument("--plot", default=None, help="write a recall-vs-layer SVG (sweep mode)")
    common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VdnaError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
