"""Command-line entry point: ``cmma {train,eval,heatmap,sample-check,gen-data}``.

Exit codes: 0 success, 1 runtime failure, 2 unreadable or malformed input,
3 invalid configuration (all violations listed), 4 unknown clip.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, Wiring, load_checkpoint, model_forward, save_checkpoint
from .errors import ConfigurationError, TrainingError
from .losses import LossWeights, concentration_matrix, flatten_attention
from .numerics import load_tensor, save_tensor
from .retrieval import all_vs_all_protocol, evaluate, extract_embeddings, pairwise_distances
from .sampling import eval_sample, max_interval, ris_sample, to_zero_based
from .synthetic import SyntheticDataset, Video, generate_dataset
from .trainer import TrainConfig, train, write_log

log = logging.getLogger("cmma")

EXIT_RUNTIME, EXIT_INPUT, EXIT_CONFIG, EXIT_CLIP = 1, 2, 3, 4
SEED_ENV = "CMMA_SEED"
DATASET_KEYS = ("seed", "C", "clips_per_id", "T", "n_train", "frame_size", "occlusion_rate", "noise", "jitter")
TOP_KEYS = ("seed", "train", "backbone", "dataset", "manifest", "eval", "output")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    seed: int
    train: TrainConfig
    backbone: BackboneConfig
    dataset: dict = field(default_factory=dict)
    manifest: str | None = None
    eval_frames: int = 6
    output: dict = field(default_factory=dict)


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: "
                                   f"{exc.msg}") from exc


def _section(raw: dict, key: str, problems: list[str]) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        problems.append(f"{key}: expected an object, got {type(value).__name__}")
        return {}
    return dict(value)


def _build(cls, kwargs: dict, where: str, problems: list[str]):
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        problems.extend(f"{where}: {p}" for p in str(exc).split("; "))
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
    return None


def build_run_config(raw, seed_override=None, ablation=None) -> RunConfig:
    """Validate a whole config dict; raises exit-3 ``CliError`` listing every violation."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise CliError(EXIT_CONFIG, "configuration must be a JSON object")
    problems += [f"unknown top-level key {k!r}" for k in raw if k not in TOP_KEYS]

    seed = raw.get("seed", 0)
    if seed_override is not None:
        seed = seed_override
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(f"seed={seed!r} must be a nonnegative integer")
        seed = 0

    tr = _section(raw, "train", problems)
    if "seed" in tr:
        problems.append("train.seed: set the seed at top level (or via CMMA_SEED)")
        tr.pop("seed")
    if ablation is not None:
        tr["ablation"] = ablation
    weights = tr.pop("weights", {})
    if isinstance(weights, dict):
        weights = _build(LossWeights, weights, "train.weights", problems)
    else:
        problems.append("train.weights: expected an object")
        weights = None
    train_cfg = _build(TrainConfig, dict(tr, seed=seed, weights=weights or LossWeights()), "train", problems)
    backbone = _build(BackboneConfig, _section(raw, "backbone", problems), "backbone", problems)

    dataset = _section(raw, "dataset", problems)
    problems += [f"dataset: unknown key {k!r}" for k in dataset if k not in DATASET_KEYS]
    manifest = raw.get("manifest")
    if manifest is not None and not isinstance(manifest, str):
        problems.append("manifest: expected a path string")
    if manifest is None:
        dataset.setdefault("C", 30)
        dataset.setdefault("clips_per_id", 2)
        dataset.setdefault("T", 32)
        ds_seed = dataset.get("seed", 0)
        if not isinstance(ds_seed, int) or isinstance(ds_seed, bool) or ds_seed < 0:
            problems.append(f"dataset.seed={ds_seed!r} must be a nonnegative integer")
        for key in ("C", "clips_per_id", "T"):
            if not isinstance(dataset[key], int) or dataset[key] < 1:
                problems.append(f"dataset.{key}={dataset[key]!r} must be a positive integer")
        if isinstance(dataset.get("C"), int) and dataset["C"] < 2:
            problems.append("dataset.C must be at least 2")
        if backbone is not None:
            size = tuple(dataset.get("frame_size", backbone.input_size))
            if size != backbone.input_size:
                problems.append(f"dataset.frame_size {list(size)} differs from backbone.input_size "
                                f"{list(backbone.input_size)}")
            dataset["frame_size"] = list(backbone.input_size)
        n_train = dataset.get("n_train")
        if n_train is not None and train_cfg is not None and n_train < train_cfg.P:
            problems.append(f"dataset.n_train={n_train} cannot fill P={train_cfg.P} identities per batch")

    ev = _section(raw, "eval", problems)
    frames = ev.get("frames", train_cfg.N if train_cfg else 6)
    if not isinstance(frames, int) or frames < 1:
        problems.append(f"eval.frames={frames!r} must be a positive integer")
    problems += [f"eval: unknown key {k!r}" for k in ev if k != "frames"]
    output = _section(raw, "output", problems)

    if problems:
        raise CliError(EXIT_CONFIG, "invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
    return RunConfig(seed, train_cfg, backbone, dataset, manifest, frames, output)


def seed_from_env() -> int | None:
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"{SEED_ENV}={value!r} is not an integer") from exc


# --- dataset manifests -------------------------------------------------------

def write_manifest(dataset: SyntheticDataset, out_dir) -> Path:
    """One tensor file per clip plus ``manifest.json`` describing identities and splits."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    identities = []
    train_ids = set(dataset.train_ids)
    for ident in sorted({v.identity for v in dataset.videos}):
        clips = []
        for v in dataset.videos:
            if v.identity != ident:
                continue
            rel = f"clips/{v.key}.cmmt"
            save_tensor(out_dir / rel, v.frames)
            clips.append({"key": v.key, "camera": v.camera, "frames": [rel],
                          "occluded": [int(i) for i in np.flatnonzero(v.occluded)]})
        identities.append({"id": ident, "split": "train" if ident in train_ids else "test",
                           "clips": clips})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps({"identities": identities, "generator": dataset.params},
                               indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> SyntheticDataset:
    """Load a manifest; ``frames`` entries are tensor files holding one frame or a stack."""
    path = Path(path)
    raw = read_json(path)
    try:
        videos, train_ids, test_ids = [], [], []
        for ident in raw["identities"]:
            i = int(ident["id"])
            (train_ids if ident.get("split", "test") == "train" else test_ids).append(i)
            for j, clip in enumerate(ident["clips"]):
                parts = [load_tensor(path.parent / ref) for ref in clip["frames"]]
                frames = np.concatenate([p[None] if p.ndim == 3 else p for p in parts])
                occluded = np.zeros(len(frames), dtype=bool)
                occluded[clip.get("occluded", [])] = True
                cam = int(clip["camera"])
                videos.append(Video(clip.get("key", f"id{i:04d}_c{cam}_{j}"), i, cam, frames, occluded))
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: bad manifest entry: {exc}") from exc
    return SyntheticDataset(videos, train_ids, test_ids, raw.get("generator", {}))


def load_dataset(cfg: RunConfig) -> SyntheticDataset:
    if cfg.manifest:
        return read_manifest(cfg.manifest)
    d = dict(cfg.dataset)
    # a pinned dataset seed keeps the benchmark fixed while the training seed varies
    seed = d.pop("seed", cfg.seed)
    return generate_dataset(d.pop("C"), d.pop("clips_per_id"), d.pop("T"), seed,
                            **{k: tuple(v) if k == "frame_size" else v for k, v in d.items()})


# --- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = build_run_config(read_json(args.config), seed_from_env(), args.ablation)
    data = load_dataset(cfg)
    out_dir = Path(args.out or cfg.output.get("dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / cfg.output.get("checkpoint", "model.ckpt")
    log_path = out_dir / cfg.output.get("log", "train_log.csv")
    state, rows = train(cfg.train, data, cfg.backbone, progress=args.verbose)
    save_checkpoint(ckpt, state)
    write_log(log_path, rows)
    if args.eval:
        metrics = run_eval(state, data.videos_of(data.test_ids), cfg.eval_frames)
        write_json(out_dir / "metrics.json", metrics)
    print(json.dumps({"checkpoint": str(ckpt), "log": str(log_path), "steps": len(rows),
                      "final_loss": rows[-1]["L_total"] if rows else None}))
    return 0


def run_eval(state, videos, frames: int) -> dict:
    emb = extract_embeddings(state, videos, frames)
    return evaluate(pairwise_distances(emb, emb), all_vs_all_protocol(videos))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset_for(args) -> SyntheticDataset:
    if args.manifest:
        return read_manifest(args.manifest)
    if args.config:
        return load_dataset(build_run_config(read_json(args.config), seed_from_env()))
    raise CliError(EXIT_INPUT, "need --manifest or --config to locate the dataset")


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc


def cmd_eval(args) -> int:
    state = _checkpoint(args.checkpoint)
    data = _dataset_for(args)
    ids = data.test_ids if args.split == "test" else data.train_ids if args.split == "train" else \
        data.train_ids + data.test_ids
    metrics = run_eval(state, data.videos_of(ids), args.frames)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit graymap; ``image`` holds values in [0, 1]."""
    h, w = image.shape
    pixels = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_heatmap(args) -> int:
    state = _checkpoint(args.checkpoint)
    data = _dataset_for(args)
    videos = data.by_key()
    if args.clip not in videos:
        raise CliError(EXIT_CLIP, f"unknown clip {args.clip!r}; known clips look like "
                                  f"{next(iter(videos), 'none')!r}")
    video = videos[args.clip]
    idx = eval_sample(len(video.frames), args.frames)
    clip = video.frames[to_zero_based(idx)][None].astype(state.params["classifier.weight"].dtype)
    attention = model_forward(clip, state).attention
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame_h, frame_w = video.frames.shape[-2:]
    summary = {"clip": args.clip, "frames": to_zero_based(idx), "mams": {}, "maps": []}
    for name in sorted(attention):
        a = attention[name][0].astype(np.float64)          # (N, K, H, W)
        n_frames, K, H, W = a.shape
        Ahat = concentration_matrix(flatten_attention(a)).output
        summary["mams"][name] = {"grid": [H, W], "K": K,
                                 "mean_diag": float(np.diagonal(Ahat, axis1=-2, axis2=-1).mean())}
        for n in range(n_frames):
            for k in range(K):
                stem = f"{name}_f{n}_k{k}"
                m = a[n, k]
                peak = float(m.max())
                up = np.repeat(np.repeat(m, frame_h // H, axis=0), frame_w // W, axis=1)
                write_pgm(out / f"{stem}.pgm", up / peak)
                with open(out / f"{stem}.csv", "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in m])
                summary["maps"].append({"mam": name, "frame": n, "submodule": k, "pgm": f"{stem}.pgm",
                                        "csv": f"{stem}.csv", "max_weight": peak})
    with open(out / "maxima.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mam", "frame", "submodule", "max_weight"])
        for m in summary["maps"]:
            w.writerow([m["mam"], m["frame"], m["submodule"], repr(m["max_weight"])])
    write_json(out / "manifest.json", summary)
    print(json.dumps({k: v["mean_diag"] for k, v in summary["mams"].items()}))
    return 0


def uniformity_summary(plans, T: int, N: int) -> dict:
    """Chi-square tests of g ~ U[1, gmax] and of s ~ U[1, T - gN] given g (pooled over g)."""
    from scipy.stats import chi2

    gmax = max_interval(T, N)
    g = np.array([p.g for p in plans])
    counts = np.bincount(g, minlength=gmax + 1)[1:]
    expected = len(g) / gmax
    g_stat = float(((counts - expected) ** 2 / expected).sum())
    g_df = gmax - 1
    s_stat, s_df = 0.0, 0
    for gv in range(1, gmax + 1):
        s = np.array([p.s for p in plans if p.g == gv])
        width = T - gv * N
        if len(s) == 0 or width < 2:
            continue
        c = np.bincount(s, minlength=width + 1)[1:]
        e = len(s) / width
        s_stat += float(((c - e) ** 2 / e).sum())
        s_df += width - 1
    return {"draws": len(plans), "g_range": [int(g.min()), int(g.max())], "g_histogram": counts.tolist(),
            "g_chi2": g_stat, "g_df": g_df, "g_p": float(chi2.sf(g_stat, g_df)) if g_df else 1.0,
            "s_chi2": s_stat, "s_df": s_df, "s_p": float(chi2.sf(s_stat, s_df)) if s_df else 1.0}


def cmd_sample_check(args) -> int:
    if args.T < 1 or args.N < 1 or args.draws < 1:
        raise CliError(EXIT_CONFIG, "T, N and draws must be positive integers")
    seed = seed_from_env()
    rng = np.random.default_rng(args.seed if seed is None else seed)
    plans = [ris_sample(args.T, args.N, rng) for _ in range(args.draws)]
    lines = [json.dumps(p.to_json()) for p in plans] if not args.summary_only else []
    if args.T < args.N + 1:
        print(f"warning: T={args.T} < N+1={args.N + 1}; every plan is padded by cycling frames",
              file=sys.stderr)
        summary = {"draws": len(plans), "padded": True}
    else:
        summary = uniformity_summary(plans, args.T, args.N)
    sys.stdout.write("".join(line + "\n" for line in lines))
    print(json.dumps({"summary": summary}))
    return 0


def cmd_gen_data(args) -> int:
    raw = read_json(args.config) if args.config else {}
    overrides = {k: v for k, v in (("C", args.C), ("clips_per_id", args.clips), ("T", args.T),
                                   ("n_train", args.n_train)) if v is not None}
    raw = dict(raw)
    raw.pop("manifest", None)
    raw["dataset"] = dict(raw.get("dataset", {}), **overrides)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = build_run_config(raw, seed_from_env())
    path = write_manifest(load_dataset(cfg), args.out)
    print(json.dumps({"manifest": str(path)}))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmma", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--ablation", choices=[w.value for w in Wiring])
    t.add_argument("--out", help="output directory (default: config output.dir or .)")
    t.add_argument("--eval", action="store_true", help="also write metrics.json on the test split")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="CMC / mAP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    e.add_argument("--config", help="regenerate the dataset described by a run config")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--frames", type=int, default=6)
    e.add_argument("--out", help="write metrics JSON here as well")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="export attention maps of one clip")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--clip", required=True, help="clip key, e.g. id0021_c1")
    h.add_argument("--manifest")
    h.add_argument("--config")
    h.add_argument("--frames", type=int, default=6)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("sample-check", help="draw interval-sampling plans and test their uniformity")
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--N", type=int, default=6)
    s.add_argument("--draws", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--summary-only", action="store_true")
    s.set_defaults(func=cmd_sample_check)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and its manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="take dataset/backbone/seed from a run config")
    g.add_argument("--C", type=int)
    g.add_argument("--clips", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--n-train", type=int, dest="n_train")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, TrainingError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
