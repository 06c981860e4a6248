"""Command-line entry point: ``meshpref <subcommand> [flags]``.

Exit status is 0 on success, 1 on a domain error (one line
``error: <code>: <message>`` on stderr) and 2 on a usage error. Every run
that writes a file also writes ``<output>.manifest.json`` next to it with the
flags, seed, package version and SHA-256 digests of inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import __version__
from .errors import MeshPrefError


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in sorted(os.walk(p)):
                for name in sorted(files):
                    full = os.path.join(root, name)
                    out[os.path.relpath(full, os.path.dirname(os.path.abspath(p)))] = _sha256(full)
        else:
            out[os.path.basename(p)] = _sha256(p)
    return out


def write_manifest(path, args, inputs, outputs) -> None:
    """RunManifest JSON. Paths are stored by name so runs in different
    directories produce identical manifests; ``--threads`` is omitted
    because it never changes results."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "threads", "command")}
    doc = {
        "subcommand": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_json(doc, path=None) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _finish(args, inputs, outputs) -> None:
    target = getattr(args, "manifest", None)
    if target is None and outputs:
        target = outputs[0].rstrip("/") + ".manifest.json"
    if target is not None:
        write_manifest(target, args, inputs, outputs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args):
    from .mesh_core import read_obj, validate

    report = validate(read_obj(args.input))
    _write_json(report.to_dict(), args.out)
    _finish(args, [args.input], [args.out] if args.out else [])


def cmd_simplify(args):
    from .mesh_core import read_obj, save_obj
    from .mesh_prep import qem_simplify

    save_obj(qem_simplify(read_obj(args.input), args.target_faces), args.output)
    _finish(args, [args.input], [args.output])


def cmd_fuse(args):
    from .mesh_core import read_obj, save_obj
    from .mesh_prep import FusionConfig, adaptive_fuse

    cfg = FusionConfig(args.normal_threshold, args.target_faces, args.max_passes)
    save_obj(adaptive_fuse(read_obj(args.input), cfg), args.output)
    _finish(args, [args.input], [args.output])


def cmd_featurize(args):
    from .features import featurize, write_csv, write_mpf
    from .mesh_core import read_obj

    feats = featurize(read_obj(args.input))
    data = write_csv(feats) if args.format == "csv" else write_mpf(feats)
    with open(args.output, "wb") as fh:
        fh.write(data)
    _finish(args, [args.input], [args.output])


def cmd_patchify(args):
    from .features import featurize, write_mpf
    from .mesh_core import read_obj
    from .mesh_prep import patchify

    mesh = read_obj(args.input)
    patch, assign = patchify(mesh, featurize(mesh))
    with open(args.features_out, "wb") as fh:
        fh.write(write_mpf(patch.to_rows()))
    sidecar = args.features_out + ".assignment.json"
    _write_json(
        {"patch_of_face": assign.patch_of_face.tolist(), "slot_of_face": assign.slot_of_face.tolist()},
        sidecar,
    )
    _finish(args, [args.input], [args.features_out, sidecar])


def cmd_csdiv(args):
    from .cs_divergence import KernelConfig, cs_divergence, cs_divergence_grad
    from .features import load_matrix

    X, Y = load_matrix(args.x), load_matrix(args.y)
    cfg = KernelConfig(args.bandwidth)
    report = cs_divergence_grad(X, Y, cfg) if args.grad else cs_divergence(X, Y, cfg)
    _write_json(report.to_dict(), args.out)
    _finish(args, [args.x, args.y], [args.out] if args.out else [])


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_theorem1(args):
    from .equivalence import Scenario, run_theorem1

    scen = Scenario.identical() if args.scenario == "identical" else Scenario()
    report = run_theorem1(args.sizes, args.trials, args.seed, scen)
    _write_json(report.to_dict(), args.out)
    _finish(args, [], [args.out] if args.out else [])


def cmd_gen_synthetic(args):
    from .synth import gen_dataset, save_dataset

    save_dataset(gen_dataset(args.n, args.seed), args.out)
    _finish(args, [], [args.out])


def cmd_train(args):
    from .reward_net import TrainConfig, TrainingSet, train
    from .synth import load_dataset

    data = TrainingSet.from_items(load_dataset(args.data).items)
    cfg = TrainConfig(lam=args.lam, lr=args.lr, epochs=args.epochs, seed=args.seed, bandwidth=args.bandwidth)
    params, history = train(data, cfg)
    with open(args.out, "w") as fh:
        fh.write(params.to_json())
    if args.history:
        _write_json({"mse": history.mse, "cs": history.cs, "total": history.total}, args.history)
    manifest_inputs = [os.path.join(args.data, "manifest.json")]
    _finish(args, manifest_inputs, [args.out] + ([args.history] if args.history else []))


def _load_params(path):
    from .reward_net import RewardParams

    with open(path) as fh:
        return RewardParams.from_json(fh.read())


def cmd_score(args):
    from .mesh_core import read_obj
    from .reward_net import score

    r = score(_load_params(args.params), read_obj(args.mesh), args.prompt)
    _write_json({"reward": r, "prompt": args.prompt}, args.out)
    _finish(args, [args.params, args.mesh], [args.out] if args.out else [])


def cmd_guide(args):
    from .guidance import GuidanceSchedule, anchor_loss, guide_optimize
    from .mesh_core import read_obj, save_obj

    sched = GuidanceSchedule(args.alpha_start, args.alpha_end, args.steps)
    final, state = guide_optimize(read_obj(args.mesh), args.prompt, _load_params(args.params), sched,
                                  anchor_loss, args.steps, args.lr)
    save_obj(final, args.out)
    outputs = [args.out]
    if args.trace:
        _write_json(state.to_dict(), args.trace)
        outputs.append(args.trace)
    _finish(args, [args.mesh, args.params], outputs)


# ---------------------------------------------------------------------------
# parser


def _bandwidth(text):
    if text == "median":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be 'median' or a number, got {text!r}") from None
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshpref", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--manifest", help="where to write the run manifest (default: next to the output)")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="cap on BLAS threads (results do not depend on it)")
        return sp

    sp = add("validate", cmd_validate, "Report mesh defects as JSON.")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out")

    sp = add("simplify", cmd_simplify, "Quadric edge-collapse simplification to a face budget.")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--target-faces", type=int, required=True)

    sp = add("fuse", cmd_fuse, "Merge near-coplanar adjacent faces down to a face budget.")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--normal-threshold", type=float, default=0.99)
    sp.add_argument("--target-faces", type=int, default=16384)
    sp.add_argument("--max-passes", type=int, default=32)

    sp = add("featurize", cmd_featurize, "Write the per-face 10-column descriptor matrix.")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--format", choices=("mpf", "csv"), default="mpf")

    sp = add("patchify", cmd_patchify, "Write the 256x64 patch grid (16384 MPF1 rows) and its face assignment.")
    sp.add_argument("--input", required=True)
    sp.add_argument("--features-out", required=True)

    sp = add("csdiv", cmd_csdiv, "Cauchy-Schwarz divergence between two sample matrices.")
    sp.add_argument("--x", required=True)
    sp.add_argument("--y", required=True)
    sp.add_argument("--bandwidth", type=_bandwidth, default="median")
    sp.add_argument("--grad", action="store_true")
    sp.add_argument("--out")

    sp = add("theorem1", cmd_theorem1, "Paired versus unpaired divergence gap over a size ladder.")
    sp.add_argument("--sizes", type=_int_list, default=[50, 100, 200, 400, 800, 1600, 3200])
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--scenario", choices=("default", "identical"), default="default")
    sp.add_argument("--out")

    sp = add("gen-synthetic", cmd_gen_synthetic, "Generate a labelled synthetic preference dataset.")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "Train the reward model on a dataset directory.")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bandwidth", type=_bandwidth, default="median")
    sp.add_argument("--out", required=True)
    sp.add_argument("--history", help="optional JSON file for per-epoch losses")

    sp = add("score", cmd_score, "Reward of one mesh under a prompt.")
    sp.add_argument("--params", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--prompt", default="")
    sp.add_argument("--out")

    sp = add("guide", cmd_guide, "Reward-guided vertex optimisation.")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--params", required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--alpha-start", type=float, default=10.0)
    sp.add_argument("--alpha-end", type=float, default=20.0)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except MeshPrefError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io_error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
