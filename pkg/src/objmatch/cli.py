"""Command-line entry point.

Settings resolve as: command-line flag, then ``--config FILE`` (flat
``key = value`` lines, keys spelled like the flags), then built-in default.
Exit status is 0 on success, 1 on a domain error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from objmatch import __version__
from objmatch.manifest import RunManifest, hash_tree, read_manifest, write_manifest

log = logging.getLogger("objmatch")

PAIRING_NAMES = {"sim-sim": 0, "real-real": 1, "sim-real": 2}


def _pairings(text: str):
    from objmatch.correspond import ALL_PAIRINGS, PairingType

    if text == "all":
        return ALL_PAIRINGS
    try:
        return tuple(PairingType(PAIRING_NAMES[t.strip().lower()]) for t in text.split(","))
    except KeyError as exc:
        raise ValueError(f"unknown pairing type {exc.args[0]!r}; use {', '.join(PAIRING_NAMES)} or all") from None


def _flag_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name, type, default, help; a default of ... marks a required setting
COMMON = [
    ("jobs", int, 1, "worker processes"),
    ("seed", int, 0, "master seed"),
]
COMMANDS: dict[str, tuple[str, list]] = {
    "gen-scenes": ("generate annotated scenes", [
        ("count", int, 12, "number of scenes"),
        ("objects", str, "9..10", "object count range LO..HI"),
        ("views", int, 50, "views per scene"),
        ("size", str, "64x64", "image size WxH"),
        ("rd-texture", float, 0.0, "texture randomization probability"),
        ("background", str, "flat", "flat or random"),
        ("domain", str, "sim", "sim or pseudo-real"),
        ("rgb-noise", float, 25.0, "pseudo-real color noise sigma"),
        ("out", str, ..., "output directory"),
    ]),
    "gen-pairs": ("sample correspondences into a pair file", [
        ("scenes", str, ..., "scene directory"),
        ("pairs", int, 2000, "number of pair records"),
        ("matches", int, 1000, "matches per pair"),
        ("non-matches", int, 5000, "non-matches per pair"),
        ("pairing", str, "all", "comma list of sim-sim, real-real, sim-real, or all"),
        ("vertex-only-occlusion", _flag_bool, False, "vertex-vs-vertex occlusion instead of the z-buffer"),
        ("out", str, ..., "output pair file"),
    ]),
    "train": ("train a descriptor network", [
        ("pairs", str, None, "pair file to replay"),
        ("scenes", str, None, "scene directory"),
        ("input", str, "rgbd", "rgb, rgbd or depth"),
        ("dim", int, 8, "descriptor dimension"),
        ("hidden", str, "16,16", "hidden channel counts"),
        ("margin", float, 0.5, "non-match margin"),
        ("steps", int, 2000, "optimizer steps"),
        ("lr", float, 5e-4, "learning rate"),
        ("init-scale", float, 0.5, "weight init scale"),
        ("out", str, ..., "checkpoint path"),
    ]),
    "eval": ("evaluate a checkpoint on a pair file", [
        ("model", str, ..., "checkpoint"),
        ("pairs", str, ..., "pair file"),
        ("scenes", str, None, "scene directory (default: from the pair file's manifest)"),
        ("queries", int, 1000, "queries per pair"),
        ("report", str, ..., "output JSON report"),
    ]),
    "visualize": ("render heatmap, match or PCA images", [
        ("model", str, ..., "checkpoint"),
        ("scenes", str, ..., "scene directory"),
        ("pair", str, ..., "two images as SCENE/IMAGE SCENE/IMAGE"),
        ("mode", str, "heatmap", "heatmap, matches or pca"),
        ("query", str, None, "query pixel U,V in image A (heatmap)"),
        ("out", str, ..., "output .png or .ppm"),
    ]),
    "selftest": ("run the built-in verification suites", [
        ("full", _flag_bool, False, "use full trial counts"),
    ]),
    "demo": ("end-to-end scenes, pairs, training and evaluation", [
        ("out", str, ..., "output directory"),
        ("scenes-per-domain", int, 12, "training scenes per domain"),
        ("eval-scenes", int, 3, "held-out scenes per domain"),
        ("views", int, 50, "views per scene"),
        ("steps", int, 2000, "training steps"),
        ("pairs", int, 2000, "pair records in the training file"),
        ("eval-pairs", int, 50, "held-out pairs per pairing type"),
        ("queries", int, 1000, "queries per evaluation pair"),
        ("dim", int, 3, "descriptor dimension"),
        ("input", str, "rgbd", "rgb, rgbd or depth"),
        ("rd-texture", float, 0.0, "texture randomization probability"),
    ]),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="objmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (summary, options) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        for opt, _, default, text in COMMON + options:
            shown = "required" if default is ... else f"default {default}"
            if opt == "pair":
                p.add_argument("--pair", nargs=2, metavar=("A", "B"), default=None, help=f"{text} ({shown})")
            else:
                p.add_argument(f"--{opt}", default=None, help=f"{text} ({shown})")
        p.add_argument("--config", default=None, help="flat key=value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults, converting types."""
    options = COMMON + COMMANDS[command][1]
    file_values = read_config_file(args.config) if args.config else {}
    known = {o[0] for o in options}
    unknown = sorted(set(file_values) - known)
    if unknown:
        hints = [f"{k} (did you mean {m[0]}?)" if (m := difflib.get_close_matches(k, known, n=1)) else k
                 for k in unknown]
        raise UsageError(f"unknown config keys for {command}: {', '.join(hints)}")
    settings = {}
    for name, kind, default, _ in options:
        raw = getattr(args, name.replace("-", "_"))
        if raw is None:
            raw = file_values.get(name)
        if raw is None:
            if default is ...:
                raise UsageError(f"{command}: --{name} is required")
            settings[name] = default
            continue
        try:
            settings[name] = raw if name == "pair" else kind(raw)
        except ValueError as exc:
            raise UsageError(f"--{name}: {exc}") from None
    return settings


# -- subcommands ------------------------------------------------------------------


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like 64x64, got {text!r}") from None
    return w, h


def _range(text: str) -> tuple[int, int]:
    try:
        lo, _, hi = text.partition("..")
        return int(lo), int(hi or lo)
    except ValueError:
        raise UsageError(f"--objects must look like 9..10, got {text!r}") from None


def cmd_gen_scenes(s: dict) -> RunManifest:
    from objmatch.scenegen import NoiseModel, SceneGenConfig, generate_dataset

    width, height = _size(s["size"])
    config = SceneGenConfig(object_count=_range(s["objects"]), views=s["views"], width=width, height=height,
                            texture_randomization=s["rd-texture"], background=s["background"],
                            domain_tag=s["domain"].replace("-", "_"), seed=s["seed"],
                            noise=NoiseModel(rgb_sigma=s["rgb-noise"]))
    out = Path(s["out"])
    outputs = {}
    for scene_dir in generate_dataset(config, s["count"], out, s["jobs"]):
        outputs.update(hash_tree(scene_dir, Path(scene_dir).name + "/"))
    return RunManifest("gen-scenes", s, {"seed": s["seed"]}, {}, outputs)


def cmd_gen_pairs(s: dict) -> RunManifest:
    from objmatch.correspond import Dataset, SamplingConfig, build_pair_file

    sampling = SamplingConfig(n_matches=s["matches"], n_non_matches=s["non-matches"],
                              occlusion="vertex_only" if s["vertex-only-occlusion"] else "zbuffer", seed=s["seed"])
    dataset = Dataset.from_directory(s["scenes"])
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    build_pair_file(dataset, s["pairs"], sampling, s["seed"], out, _pairings(s["pairing"]), s["jobs"])
    config = dict(s, scenes_resolved=str(Path(s["scenes"]).resolve()))
    return RunManifest("gen-pairs", config, {"seed": s["seed"]}, hash_tree(s["scenes"], "scenes/"),
                       {out.name: hash_tree(out)[out.name]})


def _scenes_for(pairs: str | None, scenes: str | None) -> str:
    if scenes:
        return scenes
    if pairs:
        entry = read_manifest(Path(pairs).parent, Path(pairs).name)
        if entry and "scenes_resolved" in entry["config"]:
            return entry["config"]["scenes_resolved"]
    raise UsageError("--scenes is required (no manifest records where the pair file's scenes live)")


def cmd_train(s: dict) -> RunManifest:
    from objmatch.correspond import Dataset, PairSampler
    from objmatch.descriptor import AdamState, DescriptorNet, DescriptorNetConfig, replay, save_checkpoint, train
    from objmatch.experiment import dataset_stats
    from objmatch.loss import LossConfig
    from objmatch.pairfile import read_pair_file

    scenes = _scenes_for(s["pairs"], s["scenes"])
    dataset = Dataset.from_directory(scenes)
    hidden = tuple(int(h) for h in s["hidden"].split(","))
    net_cfg = DescriptorNetConfig(s["input"], hidden, s["dim"], s["init-scale"], s["seed"])
    net = DescriptorNet(net_cfg, dataset_stats(dataset, net_cfg.input_mode))
    inputs = hash_tree(scenes, "scenes/")
    if s["pairs"]:
        source = replay(read_pair_file(s["pairs"]))
        inputs["pairs"] = hash_tree(s["pairs"])[Path(s["pairs"]).name]
    else:
        source = PairSampler(dataset, seed=s["seed"]).record
    result = train(net, dataset, source, s["steps"], LossConfig(s["margin"]), AdamState(lr=s["lr"]),
                   log_every=max(1, s["steps"] // 20))
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.net, out)
    trace = out.with_name(out.name + ".loss.json")
    trace.write_text(json.dumps({"loss": [round(x, 8) for x in result.losses]}) + "\n")
    return RunManifest("train", dict(s, scenes=scenes), {"seed": s["seed"]}, inputs,
                       {out.name: hash_tree(out)[out.name], trace.name: hash_tree(trace)[trace.name]})


def cmd_eval(s: dict) -> RunManifest:
    from objmatch.correspond import Dataset
    from objmatch.descriptor import load_checkpoint
    from objmatch.evaluate import evaluate_pairs
    from objmatch.pairfile import iter_pair_file

    scenes = _scenes_for(s["pairs"], s["scenes"])
    dataset = Dataset.from_directory(scenes)
    net = load_checkpoint(s["model"])
    specs = [spec for spec, _ in iter_pair_file(s["pairs"])]
    echo = {"dim": net.config.dim, "input_mode": net.config.input_mode}
    report = evaluate_pairs(net, dataset, specs, s["queries"], s["seed"], config_echo=echo)
    out = Path(s["report"])
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    for label, row in report.to_json()["pairing_types"].items():
        print(f"{label}: accuracy {row['object_match_accuracy']} error {row['mean_normalized_error']}")
    inputs = hash_tree(scenes, "scenes/")
    inputs["model"] = hash_tree(s["model"])[Path(s["model"]).name]
    inputs["pairs"] = hash_tree(s["pairs"])[Path(s["pairs"]).name]
    return RunManifest("eval", dict(s, scenes=scenes), {"seed": s["seed"]}, inputs, {out.name: hash_tree(out)[out.name]})


def _image_ref(text: str) -> tuple[str, str]:
    scene, sep, image = text.rpartition("/")
    if not sep:
        raise UsageError(f"--pair entries look like SCENE/IMAGE, got {text!r}")
    return scene, image


def cmd_visualize(s: dict) -> RunManifest:
    from objmatch.correspond import Dataset, SamplingConfig, generate_match_set
    from objmatch.descriptor import load_checkpoint
    from objmatch.evaluate import best_matches
    from objmatch.rng import derive_seed, seeded_rng
    from objmatch.viz import pca_colorize, render_heatmap, render_matches, write_image

    if s["mode"] not in ("heatmap", "matches", "pca"):
        raise UsageError("--mode must be heatmap, matches or pca")
    dataset = Dataset.from_directory(s["scenes"])
    net = load_checkpoint(s["model"])
    rec_a = dataset.record(*_image_ref(s["pair"][0]))
    rec_b = dataset.record(*_image_ref(s["pair"][1]))
    desc_a, desc_b = net.describe(rec_a.image).values, net.describe(rec_b.image).values
    if s["mode"] == "heatmap":
        if s["query"]:
            u, v = (float(x) for x in s["query"].split(","))
        else:
            rows, cols = np.nonzero(rec_a.image.mask >= 0)
            if len(rows) == 0:
                raise ValueError("image A has no object pixels; pass --query")
            k = int(np.argmin((rows - rec_a.image.height / 2) ** 2 + (cols - rec_a.image.width / 2) ** 2))
            u, v = cols[k] + 0.5, rows[k] + 0.5
        image = render_heatmap(desc_a[int(v), int(u)], desc_b, rec_b.image.rgb)
    elif s["mode"] == "matches":
        rng = seeded_rng(derive_seed(s["seed"], "visualize"))
        ms = generate_match_set(rec_a, rec_b, SamplingConfig(n_matches=20, n_non_matches=20), rng)
        idx = np.floor(ms.match_a).astype(int)
        predicted = best_matches(desc_a[idx[:, 1], idx[:, 0]], desc_b) + 0.5
        image = render_matches(rec_a.image.rgb, rec_b.image.rgb, ms.match_a, ms.match_b,
                               ms.non_match_a, ms.non_match_b, predicted)
    else:
        col_a, col_b = pca_colorize([desc_a, desc_b], [rec_a.image.mask, rec_b.image.mask], seed=s["seed"])
        image = np.concatenate([col_a, col_b], axis=1)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, image)
    inputs = hash_tree(s["scenes"], "scenes/")
    inputs["model"] = hash_tree(s["model"])[Path(s["model"]).name]
    return RunManifest("visualize", s, {"seed": s["seed"]}, inputs, {out.name: hash_tree(out)[out.name]})


def cmd_selftest(s: dict) -> int:
    from objmatch.checks import run_selftest

    results = run_selftest(quick=not s["full"])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def pipeline_demo(out: str | Path, settings: dict) -> dict:
    """Scenes to disk, pair file, replayed training, per-pairing-type evaluation report."""
    from objmatch.correspond import ALL_PAIRINGS, Dataset, SamplingConfig, build_pair_file
    from objmatch.descriptor import DescriptorNet, DescriptorNetConfig, replay, save_checkpoint, train
    from objmatch.evaluate import evaluate_pairs, held_out_pairs
    from objmatch.experiment import EVAL_SCENE_OFFSET, dataset_stats
    from objmatch.pairfile import read_pair_file
    from objmatch.scenegen import SceneGenConfig, generate_scene, scene_name, scene_seed_for, with_domain

    out = Path(out)
    seed = settings["seed"]
    base = SceneGenConfig(views=settings["views"], texture_randomization=settings["rd-texture"], seed=seed)
    for split, count, offset in (("train", settings["scenes-per-domain"], 0),
                                 ("eval", settings["eval-scenes"], EVAL_SCENE_OFFSET)):
        for domain in ("sim", "pseudo_real"):
            cfg = with_domain(base, domain)
            for k in range(offset, offset + count):
                scene = generate_scene(cfg, scene_seed_for(cfg, k), scene_name(cfg, k))
                scene.write(out / "scenes" / split / scene.annotation.scene_id)
    train_ds = Dataset.from_directory(out / "scenes" / "train")
    eval_ds = Dataset.from_directory(out / "scenes" / "eval")
    sampling = SamplingConfig(seed=seed)
    pairs_path = build_pair_file(train_ds, settings["pairs"], sampling, seed, out / "pairs.prs", ALL_PAIRINGS,
                                 settings["jobs"])
    net_cfg = DescriptorNetConfig(input_mode=settings["input"], dim=settings["dim"], seed=seed)
    net = DescriptorNet(net_cfg, dataset_stats(train_ds, net_cfg.input_mode))
    result = train(net, train_ds, replay(read_pair_file(pairs_path)), settings["steps"])
    save_checkpoint(result.net, out / "model.srd")
    pairs = [spec for ptype in ALL_PAIRINGS
             for spec in held_out_pairs(eval_ds, settings["eval-pairs"], ptype, seed + int(ptype))]
    echo = {"dim": net_cfg.dim, "input_mode": net_cfg.input_mode, "texture_randomization": settings["rd-texture"],
            "steps": settings["steps"], "seed": seed}
    report = evaluate_pairs(result.net, eval_ds, pairs, settings["queries"], seed, sampling, echo)
    doc = report.to_json()
    doc["training"] = {"first_loss": round(result.losses[0], 8) if result.losses else None,
                       "final_loss": round(float(np.mean(result.losses[-50:])), 8) if result.losses else None}
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def cmd_demo(s: dict) -> RunManifest:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = pipeline_demo(out, s)
    for label, row in doc["pairing_types"].items():
        print(f"{label}: accuracy {row['object_match_accuracy']} error {row['mean_normalized_error']}")
    return RunManifest("demo", s, {"seed": s["seed"]}, {}, hash_tree(out))


HANDLERS = {
    "gen-scenes": cmd_gen_scenes,
    "gen-pairs": cmd_gen_pairs,
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "selftest": cmd_selftest,
    "demo": cmd_demo,
}


def _manifest_target(command: str, s: dict) -> tuple[Path, str]:
    if command == "gen-scenes":
        # sim and pseudo-real sets may share one directory; each keeps its own entry
        return Path(s["out"]), "scenes:" + s["domain"].replace("-", "_")
    if command == "demo":
        return Path(s["out"]), "."
    key = "report" if command == "eval" else "out"
    path = Path(s[key])
    return path.parent, path.name


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        close = difflib.get_close_matches(argv[0], list(COMMANDS), n=1)
        hint = f" (did you mean {close[0]}?)" if close else ""
        print(f"{parser.format_usage()}objmatch: error: unknown command {argv[0]!r}{hint}", file=sys.stderr)
        return 2
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            print(parser.format_help(), file=sys.stderr)
            return 2
        if extra:
            flags = [f"--{o[0]}" for o in COMMON + COMMANDS[args.command][1]] + ["--config", "--verbose"]
            hints = "".join(f"\n  did you mean {m[0]}?" for t in extra
                            if (m := difflib.get_close_matches(t.split("=")[0], flags, n=1)))
            raise UsageError(f"objmatch {args.command}: error: unrecognized arguments: {' '.join(extra)}{hints}")
        settings = resolve(args.command, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        result = HANDLERS[args.command](settings)
    except UsageError as exc:
        print(f"objmatch {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, KeyError, ArithmeticError) as exc:
        print(f"objmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if isinstance(result, int):
        return result
    if args.config:
        result.inputs["config"] = hash_tree(args.config)[Path(args.config).name]
    result.wall_clock_seconds = round(time.perf_counter() - start, 3)
    directory, entry = _manifest_target(args.command, settings)
    write_manifest(directory, entry, result)
    return 0


def main() -> None:
    sys.exit(dispatch())
