"""Command-line entry point: ``umad {gen-data,train,restore,eval,flow}``.

Exit codes: 0 success, 2 bad input (arguments, paths, file formats),
3 training aborted on a non-finite loss, 4 checkpoint/model topology mismatch.
The environment variable UMAD_SEED overrides ``--seed`` when set.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_synth import (DatasetManifest, DegradationSpec, FrameSequence, ManifestEntry, degrade,
                         generate_synthetic_sequence, load_manifest, read_frames, save_manifest, write_flows,
                         write_frames)
from .errors import FormatError, TopologyError, TrainingError

EXIT_OK, EXIT_INPUT, EXIT_TRAINING, EXIT_TOPOLOGY = 0, 2, 3, 4
PRESETS = ("shift", "rotate", "mixed")
TEXTURES = ("noise", "checker", "sprites")


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def emit(self, stream=None):
        print(json.dumps({"exit_code": self.exit_code, "artifacts": [str(a) for a in self.artifacts],
                          "summary": self.summary}, sort_keys=True), file=stream or sys.stdout)


class InputError(Exception):
    pass


def _seed(args):
    env = os.environ.get("UMAD_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise InputError(f"UMAD_SEED must be an integer, got {env!r}") from None
    return args.seed


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def preset_motion(preset, rng, H, W):
    """(shift, rotation, texture) drawn for one sequence of ``preset``."""
    if preset == "shift":
        while True:
            d = rng.integers(-2, 3, size=2)
            if d.any():
                return (float(d[0]), float(d[1])), 0.0, "noise"
    if preset == "rotate":
        return (0.0, 0.0), 2.0, "sprites"
    d = np.round(rng.uniform(-2, 2, size=2), 1)
    return (float(d[0]), float(d[1])), 0.0, TEXTURES[int(rng.integers(len(TEXTURES)))]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    seed = _seed(args)
    try:
        spec = DegradationSpec.parse(args.degrade)
    except ValueError as err:
        raise InputError(f"--degrade: {err}") from None
    H, W = args.size
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise InputError(f"cannot write to {out}: {err}") from None
    rng = np.random.default_rng(seed)
    entries, artifacts = [], []
    for i in range(args.count):
        shift, rot, tex = preset_motion(args.preset, rng, H, W)
        seq_seed = int(rng.integers(2 ** 31))
        try:
            clean, flows = generate_synthetic_sequence(seq_seed, args.frames, H, W, shift=shift, rotation=rot,
                                                       texture=tex)
        except ValueError as err:
            raise InputError(str(err)) from None
        deg = degrade(clean, spec, seq_seed + 1)
        base = f"seq_{i:03d}"
        artifacts += write_frames(out / base / "clean", clean)
        artifacts += write_frames(out / base / "degraded", deg)
        artifacts += write_flows(out / base / "flow", flows)
        entries.append(ManifestEntry(f"{base}/clean", f"{base}/degraded", args.frames, H, W, spec, f"{base}/flow"))
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, DatasetManifest(entries, out))
    artifacts.append(manifest_path)
    return CommandResult(0, artifacts, {"sequences": args.count, "frames": args.frames, "size": [H, W],
                                        "preset": args.preset, "degradation": spec.to_dict()})


def _manifest(path):
    try:
        return load_manifest(path)
    except (OSError, FormatError) as err:
        raise InputError(f"cannot load manifest {path}: {err}") from None


def cmd_train(args):
    from .harness import TrainConfig, train

    manifest = _manifest(args.data)
    try:
        cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    except (OSError, ValueError, TypeError) as err:
        raise InputError(f"bad config {args.config}: {err}") from None
    if args.seed is not None or os.environ.get("UMAD_SEED"):
        cfg.seed = _seed(args)
    out = Path(args.out)
    try:
        res = train(cfg, manifest, out_dir=out)
    except TrainingError as err:
        arts = [err.checkpoint] if err.checkpoint else []
        return CommandResult(EXIT_TRAINING, arts, {"error": str(err), "term": err.term})
    final = res.records[-1]["losses"] if res.records else {}
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return CommandResult(0, [res.checkpoint, out / "train_log.jsonl", out / "config.json"],
                         {"steps": res.steps, "final_losses": final})


def _load_ckpt(path):
    from .harness import load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, FormatError) as err:
        raise InputError(f"cannot load checkpoint {path}: {err}") from None


def cmd_restore(args):
    from .diffusion import SamplerConfig
    from .model import restore_sequence

    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.build_model()
    try:
        deg = read_frames(args.inp)
    except (OSError, FormatError, ValueError) as err:
        raise InputError(f"cannot read frames from {args.inp}: {err}") from None
    ablation = (ckpt.train_config or {}).get("ablation", "full")
    try:
        restored = restore_sequence(model, deg, SamplerConfig(T=args.steps or model.config.diffusion_steps,
                                                              seed=_seed(args)),
                                    quality_q=args.quality, ablation=ablation)
    except ValueError as err:
        raise InputError(str(err)) from None
    arts = write_frames(args.out, restored)
    return CommandResult(0, arts, {"frames": len(restored)})


def _report_row(name, rep):
    d = rep.to_dict()
    return {"sequence": name, **{k: d[k] for k in ("psnr_db", "ssim", "tof", "mean_flow_mag")}}


def cmd_eval(args):
    from .harness import evaluate, passthrough_restorer, sequences_from_manifest

    manifest = _manifest(args.data)
    seqs = sequences_from_manifest(manifest)
    if args.passthrough:
        res = evaluate(None, sequences=seqs, restorer=passthrough_restorer)
    else:
        if not args.ckpt:
            raise InputError("--ckpt is required unless --passthrough is given")
        res = evaluate(_load_ckpt(args.ckpt), sequences=seqs, seed=_seed(args))
    names = [s.name for s in seqs]
    agg = res.aggregate.to_dict()
    doc = {k: agg[k] for k in ("psnr_db", "ssim", "tof", "mean_flow_mag")}
    doc["sequences"] = [_report_row(n, r) for n, r in zip(names, res.per_sequence)]
    doc["degraded"] = {k: res.degraded_aggregate.to_dict()[k] for k in ("psnr_db", "ssim", "tof", "mean_flow_mag")}
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    arts = [report]
    if args.per_frame:
        path = report.with_suffix(".csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sequence", "frame", "psnr_db", "ssim", "tof", "mean_flow_mag"])
            for n, r in zip(names, res.per_sequence):
                pf = r.to_dict()["per_frame"]
                for i in range(len(pf["psnr_db"])):
                    flow_ok = i < len(pf["tof"])
                    w.writerow([n, i, pf["psnr_db"][i], pf["ssim"][i], pf["tof"][i] if flow_ok else "",
                                pf["mean_flow_mag"][i] if flow_ok else ""])
                row = _report_row(n, r)
                w.writerow([n, "all", row["psnr_db"], row["ssim"], row["tof"], row["mean_flow_mag"]])
        arts.append(path)
    return CommandResult(0, arts, {k: doc[k] for k in ("psnr_db", "ssim", "tof", "mean_flow_mag")})


def cmd_flow(args):
    import torch

    from .data_synth import FlowField
    from .flow import block_match_oracle

    if args.method == "model" and not args.ckpt:
        raise InputError("--method model needs --ckpt")
    try:
        seq = read_frames(args.inp)
    except (OSError, FormatError, ValueError) as err:
        raise InputError(f"cannot read frames from {args.inp}: {err}") from None
    if len(seq) < 2:
        raise InputError("flow needs at least two frames")
    f = seq.frames
    if args.method == "oracle":
        flows = [block_match_oracle(f[t], f[t + 1], args.radius, args.block) for t in range(len(f) - 1)]
    else:
        model = _load_ckpt(args.ckpt).build_model()
        dtype = next(model.parameters()).dtype
        x = torch.as_tensor(f, dtype=dtype).permute(0, 3, 1, 2)
        with torch.no_grad():
            est = model.flow(x[:-1], x[1:]).double().numpy()
        flows = [FlowField.from_array(e.transpose(1, 2, 0)) for e in est]
    arts = write_flows(args.out, flows)
    return CommandResult(0, arts, {"flows": len(flows), "method": args.method})


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="umad", description="Motion-aware diffusion video restoration.",
                                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset with exact flows", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--preset", choices=PRESETS, default="shift", help="motion preset")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--size", type=_size, default=(64, 64), help="frame size HxW")
    g.add_argument("--frames", type=int, default=9, help="frames per sequence")
    g.add_argument("--count", type=int, default=1, help="number of sequences")
    g.add_argument("--degrade", default="noise=0.05,blur=0,q=1,flicker=0.05",
                   help="degradation spec noise=..,blur=..,q=..,flicker=..")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a manifest", formatter_class=fmt)
    t.add_argument("--config", default=None, help="JSON training config (defaults when omitted)")
    t.add_argument("--data", required=True, help="dataset manifest JSON")
    t.add_argument("--out", required=True, help="directory for checkpoints and the training log")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("restore", help="restore a directory of frames", formatter_class=fmt)
    r.add_argument("--ckpt", required=True, help="checkpoint file")
    r.add_argument("--in", dest="inp", required=True, help="directory of degraded frames")
    r.add_argument("--out", required=True, help="directory for restored frames")
    r.add_argument("--seed", type=int, default=0, help="sampler seed")
    r.add_argument("--quality", type=float, default=1.0, help="encoding-quality prior in (0, 1]")
    r.add_argument("--steps", type=int, default=None, help="diffusion steps (checkpoint value when omitted)")
    r.set_defaults(fn=cmd_restore)

    e = sub.add_parser("eval", help="restore and score every manifest sequence", formatter_class=fmt)
    e.add_argument("--ckpt", default=None, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset manifest JSON")
    e.add_argument("--report", required=True, help="metrics report JSON path")
    e.add_argument("--per-frame", action="store_true", help="also write a per-frame CSV next to the report")
    e.add_argument("--passthrough", action="store_true", help="score the degraded input itself (no model)")
    e.add_argument("--seed", type=int, default=0, help="sampler seed")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("flow", help="estimate flow between consecutive frames", formatter_class=fmt)
    f.add_argument("--in", dest="inp", required=True, help="directory of frames")
    f.add_argument("--out", required=True, help="directory for flow files")
    f.add_argument("--method", choices=("oracle", "model"), default="oracle", help="flow estimator")
    f.add_argument("--ckpt", default=None, help="checkpoint file (method model)")
    f.add_argument("--radius", type=int, default=4, help="oracle search radius")
    f.add_argument("--block", type=int, default=8, help="oracle block size")
    f.set_defaults(fn=cmd_flow)
    return p


def run(argv=None):
    """Parse and execute; returns a :class:`CommandResult` (argparse errors exit with 2)."""
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InputError as err:
        return CommandResult(EXIT_INPUT, [], {"error": str(err)})
    except TopologyError as err:
        return CommandResult(EXIT_TOPOLOGY, [], {"error": str(err)})
    except (FormatError, FileNotFoundError) as err:
        return CommandResult(EXIT_INPUT, [], {"error": str(err)})


def main(argv=None):
    res = run(argv)
    res.emit(sys.stderr if res.exit_code else sys.stdout)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
