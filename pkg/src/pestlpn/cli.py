"""Command-line entry point: ``pestlpn <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "missing_file": 3,
    "config": 4,
    "data": 5,
    "no_rule": 6,
    "checkpoint": 7,
}

EXIT_TABLE = """exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, bad value)
  3  missing file or directory
  4  configuration validation failure
  5  dataset problem (too few classes/images, undecodable image)
  6  no knowledge-base rule for the crop/pest
  7  unreadable or version-mismatched checkpoint

Errors are printed to stderr as a single JSON line:
  {"error": "<kind>", "exit_code": <n>, "message": "..."}"""


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _emit_error(kind: str, message: str) -> int:
    code = EXIT_CODES[kind]
    print(json.dumps({"error": kind, "exit_code": code, "message": " ".join(message.split())}),
          file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SystemExit(_emit_error("usage", f"{self.prog}: {message}"))


def _add_seed(p, default=0):
    p.add_argument("--seed", type=int, default=default, help=f"RNG seed (default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pestlpn", description="Few-shot pest recognition and pesticide "
                     "decision support.", epilog=EXIT_TABLE,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_TABLE,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("fixture", "Write a synthetic <root>/<crop>/<class>/*.png dataset.")
    p.add_argument("--out", required=True, type=Path, help="dataset root to create")
    p.add_argument("--classes", type=int, default=5, help="classes per crop (default 5)")
    p.add_argument("--per-class", type=int, default=30, help="images per class (default 30)")
    p.add_argument("--size", type=int, default=100, help="image side in pixels (default 100)")
    p.add_argument("--crops", default="fixture", help="comma-separated crop names")
    _add_seed(p)

    p = add("scan", "Index a dataset directory and report per-class image counts.")
    p.add_argument("--root", required=True, type=Path, help="dataset root")
    p.add_argument("--out", type=Path, help="optional CSV index to write")

    p = add("train", "Meta-train a backbone from a run config file.")
    p.add_argument("--config", required=True, type=Path,
                   help='JSON run config {"backbone": {...}, "training": {...}}')
    p.add_argument("--data", required=True, type=Path, help="training dataset root")
    p.add_argument("--crop", help="restrict training to one crop directory")
    p.add_argument("--out", required=True, type=Path,
                   help="output directory for checkpoint.pt and training_log.csv")
    p.add_argument("--seed", type=int, help="override training.seed")
    p.add_argument("--episodes", type=int, help="override training.meta_episodes")
    p.add_argument("--epochs", type=int, help="override training.epochs_per_episode")
    p.add_argument("--lr", type=float, help="override training.learning_rate")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")

    p = add("eval", "Nested-support 1/3/5-shot evaluation over repeated assignments.")
    p.add_argument("--checkpoint", required=True, action="append", type=Path,
                   help="model checkpoint (repeat to compare models)")
    p.add_argument("--name", action="append", help="display name per checkpoint")
    p.add_argument("--data", required=True, type=Path, help="test dataset root")
    p.add_argument("--crop", help="crop directory to evaluate (default: all classes)")
    p.add_argument("--assignments", type=int, default=10, help="testing assignments (default 10)")
    p.add_argument("--shots", default="1,3,5", help="comma-separated shots (default 1,3,5)")
    p.add_argument("--out", required=True, type=Path, help="report output directory")
    _add_seed(p)

    p = add("classify", "Classify one image against support images or a protoset file.")
    p.add_argument("--checkpoint", required=True, type=Path, help="model checkpoint")
    p.add_argument("--image", required=True, type=Path, help="image to classify")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--supports", type=Path, help="directory of <class>/<images>")
    group.add_argument("--protoset", type=Path, help="protoset file from export-protos")
    p.add_argument("--crop", help="with --stage/--condition, also print a recommendation")
    p.add_argument("--stage", default="any", help="growth stage for the recommendation")
    p.add_argument("--condition", action="append", default=[], help="condition tag (repeatable)")
    p.add_argument("--threshold", type=float, default=0.5, help="confidence threshold")
    p.add_argument("--kb", type=Path, help="knowledge base file (default: $PESTLPN_KB or shipped)")

    p = add("recommend", "Look up a pesticide recommendation in the knowledge base.")
    p.add_argument("--crop", required=True, help="sugarcane | wheat")
    p.add_argument("--pest", required=True, help='pest name, e.g. "Cutting Weevil"')
    p.add_argument("--stage", default="any", help="early_growth | vegetative | any")
    p.add_argument("--condition", action="append", default=[],
                   help="condition tag or phrase, e.g. high_humidity (repeatable)")
    p.add_argument("--severity", choices=("low", "medium", "high"), help="infestation severity")
    p.add_argument("--kb", type=Path, help="knowledge base file (default: $PESTLPN_KB or shipped)")

    p = add("export-protos", "Write a protoset file from a checkpoint and support images.")
    p.add_argument("--checkpoint", required=True, type=Path, help="model checkpoint")
    p.add_argument("--supports", required=True, type=Path, help="directory of <class>/<images>")
    p.add_argument("--out", required=True, type=Path, help="protoset file to write")
    return parser


def _require(path: Path, what: str, kind="file"):
    ok = path.is_file() if kind == "file" else path.is_dir()
    if not ok:
        raise CliError("missing_file", f"{what} {path} not found")


def _cmd_fixture(args):
    from .datapipe import generate_fixture

    crops = [c.strip() for c in args.crops.split(",") if c.strip()]
    if args.classes < 1 or args.per_class < 1 or args.size < 2 or not crops:
        raise CliError("config", "classes, per-class must be >= 1, size >= 2, crops non-empty")
    generate_fixture(args.out, args.classes, args.per_class, args.size, args.seed, crops)
    print(f"wrote {args.classes * len(crops) * args.per_class} images to {args.out}")


def _cmd_scan(args):
    from .datapipe import scan_dataset

    _require(args.root, "dataset root", "dir")
    index = scan_dataset(args.root)
    print(f"images: {len(index)}")
    for label, count in index.counts.items():
        print(f"{label}\t{count}")
    for w in index.warnings:
        print(f"warning: {w}")
    if args.out:
        index.write_csv(args.out)


def _dataset_groups(root: Path, crop: str | None):
    from .datapipe import scan_dataset

    _require(root, "dataset root", "dir")
    index = scan_dataset(root)
    if crop is not None and crop not in index.crops:
        raise CliError("data", f"crop {crop!r} not found under {root}")
    groups = index.groups(crop)
    if not groups:
        raise CliError("data", f"no images found under {root}")
    return groups


def _cmd_train(args):
    import torch

    from .backbone import build_backbone, input_size_of
    from .checkpoint import save_checkpoint
    from .datapipe import AugmentationConfig, ImageStore
    from .metatrain import TrainingConfig, load_run_config, meta_train

    _require(args.config, "config file")
    try:
        backbone, tconf = load_run_config(args.config)
        overrides = {"seed": args.seed, "meta_episodes": args.episodes,
                     "epochs_per_episode": args.epochs, "learning_rate": args.lr}
        data = tconf.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        if args.no_augment:
            data["augment"] = False
        tconf = TrainingConfig.from_dict(data)
        aug = AugmentationConfig(**backbone["augmentation"]) if backbone["augmentation"] else None
        torch.manual_seed(tconf.seed)
        model = build_backbone(backbone["name"], backbone["config"] or None)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CliError("config", str(exc)) from exc
    groups = _dataset_groups(args.data, args.crop)
    store = ImageStore(input_size_of(model))
    result = meta_train(model, groups, tconf, store=store, augmentation=aug)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, args.out / "checkpoint.pt", tconf.to_dict(),
                    result.optimizer_state)
    result.log.write_csv(args.out / "training_log.csv")
    losses = result.log.losses()
    print(f"episodes: {tconf.meta_episodes} steps: {len(losses)} "
          f"first_loss: {losses[0]:.6f} final_loss: {losses[-1]:.6f}")
    print(f"checkpoint: {args.out / 'checkpoint.pt'}")
    print(f"log: {args.out / 'training_log.csv'}")


def _load_model(path: Path):
    from .checkpoint import load_checkpoint

    _require(path, "checkpoint")
    return load_checkpoint(path).model


def _cmd_eval(args):
    from .backbone import input_size_of
    from .datapipe import ImageStore
    from .evaluation import CachedEmbedder, run_protocol

    names = args.name or []
    if names and len(names) != len(args.checkpoint):
        raise CliError("usage", "give one --name per --checkpoint")
    try:
        shots = tuple(int(s) for s in args.shots.split(","))
    except ValueError as exc:
        raise CliError("usage", f"bad --shots {args.shots!r}") from exc
    groups = _dataset_groups(args.data, args.crop)
    embedders = {}
    for i, path in enumerate(args.checkpoint):
        model = _load_model(path)
        name = names[i] if names else path.stem if path.stem != "checkpoint" else path.parent.name
        if name in embedders:
            name = f"{name}_{i}"
        embedders[name] = CachedEmbedder(model, ImageStore(input_size_of(model)).batch)
    report = run_protocol(embedders, groups, args.assignments, shots, args.seed)
    files = report.write(args.out)
    for model in report.models():
        for shot in shots:
            s = report.summaries[(model, shot)]["ALL"]["accuracy"]
            print(f"{model}\t{shot}-shot\taccuracy {s.mean:.4f} ± {s.std:.4f}")
    for a, b, shot, r in report.significance:
        print(f"{a} vs {b}\t{shot}-shot\tt={r.t:.4f} p={r.p:.4g} "
              f"{'significant' if r.significant else 'not significant'}")
    for path in files.values():
        print(f"wrote {path}")


def _support_batches(directory: Path, size: int):
    import torch

    from .datapipe import ImageStore, _is_supported_image

    _require(directory, "support directory", "dir")
    store = ImageStore(size)
    batches = {}
    for class_dir in sorted(p for p in directory.iterdir() if p.is_dir()):
        files = [f for f in sorted(class_dir.iterdir()) if f.is_file() and _is_supported_image(f)]
        if files:
            batches[class_dir.name] = torch.stack([store.tensor(f) for f in files])
    if not batches:
        raise CliError("data", f"no support images under {directory}/<class>/")
    return batches


def _protos_from_supports(model, directory: Path):
    import torch

    from .backbone import input_size_of
    from .episodic import compute_prototypes

    batches = _support_batches(directory, input_size_of(model))
    with torch.no_grad():
        return compute_prototypes({k: model(v) for k, v in batches.items()})


def _cmd_classify(args):
    import torch

    from .backbone import input_size_of
    from .datapipe import preprocess
    from .dss import load_knowledge_base, recommend_from_detection
    from .episodic import PrototypeSet, classify_query

    model = _load_model(args.checkpoint)
    _require(args.image, "image")
    image = preprocess(args.image, input_size_of(model))
    if args.protoset is not None:
        _require(args.protoset, "protoset file")
        protos = PrototypeSet.load(args.protoset)
    else:
        protos = _protos_from_supports(model, args.supports)
    if args.crop:
        kb = load_knowledge_base(args.kb)
        result = recommend_from_detection(image, protos, args.crop, args.stage, args.condition,
                                          kb, model, threshold=args.threshold)
        dist = result.distribution
    else:
        with torch.no_grad():
            dist = classify_query(model(image.unsqueeze(0))[0].to(protos.vectors.dtype), protos)
        result = None
    for label, prob in dist.as_dict().items():
        print(f"{label}\t{prob:.6f}")
    print(f"prediction: {dist.top_label()}")
    if result is not None:
        if result.error is not None:
            raise CliError("no_rule", str(result.error))
        for line in result.recommendation.lines():
            print(line)
        if result.uncertain:
            print("uncertain: yes")


def _cmd_recommend(args):
    from .dss import RecommendationQuery, load_knowledge_base, recommend

    kb = load_knowledge_base(args.kb)
    query = RecommendationQuery(args.crop, args.pest, args.stage, args.condition, args.severity)
    for line in recommend(query, kb).lines():
        print(line)


def _cmd_export_protos(args):
    model = _load_model(args.checkpoint)
    protos = _protos_from_supports(model, args.supports)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    protos.save(args.out)
    print(f"wrote {len(protos)} prototypes (dim {protos.dim}) to {args.out}")


COMMANDS = {
    "fixture": _cmd_fixture,
    "scan": _cmd_scan,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "classify": _cmd_classify,
    "recommend": _cmd_recommend,
    "export-protos": _cmd_export_protos,
}


def run(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .datapipe import ImageDecodeError
    from .dss import KnowledgeBaseError, NoRuleFound, UnknownConditionError
    from .episodic import EpisodeError
    from .evaluation import EvaluationError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        return _emit_error(exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _emit_error("missing_file", str(exc))
    except NoRuleFound as exc:
        return _emit_error("no_rule", str(exc))
    except CheckpointError as exc:
        return _emit_error("checkpoint", str(exc))
    except (EpisodeError, EvaluationError, ImageDecodeError, FileExistsError) as exc:
        return _emit_error("data", str(exc))
    except (KnowledgeBaseError, UnknownConditionError, ValueError) as exc:
        return _emit_error("config", str(exc))
    except Exception as exc:  # noqa: BLE001
        return _emit_error("internal", f"{type(exc).__name__}: {exc}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
