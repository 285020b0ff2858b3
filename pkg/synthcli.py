# synthcli.py
"""
monoview command line.

    python synthcli.py train       --config monoview.cfg --out runs/kitti
    python synthcli.py synthesize  --checkpoint runs/kitti --input frame.png --direction lr --out out/
    python synthcli.py interpolate --checkpoint runs/kitti --input frame.png --alphas 0,0.5,1 --out out/
    python synthcli.py evaluate    --pred out/ --gt gt/ [--mask masks/]
    python synthcli.py evaluate    --checkpoint runs/kitti --data-root data/kitti --split test
    python synthcli.py confidence  --checkpoint runs/kitti --left l.png --right r.png --out out/
    python synthcli.py inspect     [--checkpoint runs/kitti]
"""

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

import config as config_module
import consistency
import datapipe
import evalsuite
import image_io
import trainer
from consistency import PredictionBundle
from netdef import COMPONENT_GROUPS, INPUT_DIVISOR, ModelGraph, build_model, count_parameters, layer_table
from warp import WarpDirection

logger = logging.getLogger(__name__)

OUTPUT_KINDS = ("view", "disparity", "confidence", "dbp", "ref")


def quiet_loggers():
    for logger_name in [
        "PIL",
        "matplotlib",
        "urllib3",
    ]:
        logging.getLogger(logger_name).setLevel(logging.WARNING)


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
    )
    quiet_loggers()


@dataclass
class SynthesisRequest:
    input_path: Path
    checkpoint: Path
    out_dir: Path
    direction: WarpDirection = WarpDirection.LEFT_TO_RIGHT
    outputs: frozenset[str] = frozenset({"view"})
    png_maps: bool = False

    def __post_init__(self):
        self.input_path, self.checkpoint, self.out_dir = Path(self.input_path), Path(self.checkpoint), Path(self.out_dir)
        self.direction = WarpDirection.parse(self.direction)
        self.outputs = frozenset(self.outputs)
        unknown = self.outputs - set(OUTPUT_KINDS)
        if unknown or not self.outputs:
            raise ValueError(f"outputs must be a non-empty subset of {', '.join(OUTPUT_KINDS)}, got {sorted(self.outputs)}")


@dataclass
class InterpolationRequest:
    input_path: Path
    checkpoint: Path
    out_dir: Path
    direction: WarpDirection = WarpDirection.LEFT_TO_RIGHT
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])

    def __post_init__(self):
        self.input_path, self.checkpoint, self.out_dir = Path(self.input_path), Path(self.checkpoint), Path(self.out_dir)
        self.direction = WarpDirection.parse(self.direction)
        self.alphas = [float(a) for a in self.alphas]
        if not self.alphas:
            raise ValueError("at least one alpha is required")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError(f"alphas must lie in [0, 1], got {self.alphas}")
        if self.alphas != sorted(self.alphas):
            raise ValueError(f"alphas must be sorted, got {self.alphas}")


def pad_to_multiple(x: torch.Tensor, divisor: int = INPUT_DIVISOR) -> tuple[torch.Tensor, tuple[int, int]]:
    """Pad N×C×H×W on the bottom/right to multiples of ``divisor``; returns the original (H, W).

    Reflection padding is used when the image is large enough, edge
    replication otherwise.
    """
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % divisor, (-w) % divisor
    if pad_h == 0 and pad_w == 0:
        return x, (h, w)
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode), (h, w)


def crop_bundle(bundle: PredictionBundle, size: tuple[int, int]) -> PredictionBundle:
    h, w = size
    cropped = {name: None if t is None else t[..., :h, :w] for name, t in vars(bundle).items()}
    return PredictionBundle(**cropped)


def load_input(path: Path) -> torch.Tensor:
    return datapipe.normalize(image_io.read_png(path)).unsqueeze(0)


def input_images(path: Path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        images = image_io.list_pngs(path)
        if not images:
            raise FileNotFoundError(f"No PNG files in {path}")
        return images
    if not path.is_file():
        raise FileNotFoundError(f"Input image not found: {path}")
    return [path]


def write_bundle(bundle: PredictionBundle, stem: str, out_dir: Path, outputs: frozenset[str],
                 png_maps: bool = False) -> list[Path]:
    """Write the requested artifacts of a single-image bundle; returns the paths written."""
    written = []
    for kind, image in (("view", bundle.blended), ("dbp", bundle.dbp), ("ref", bundle.ref)):
        if kind in outputs:
            written.append(image_io.write_png(datapipe.denormalize(image), out_dir / f"{stem}_{kind}.png"))
    if "disparity" in outputs:
        disparity = bundle.disparity[0, 0].cpu().numpy()
        written.append(image_io.write_pfm(disparity, out_dir / f"{stem}_disparity.pfm"))
        if png_maps:
            written.append(image_io.write_map_png(disparity, out_dir / f"{stem}_disparity.png"))
    if "confidence" in outputs:
        # V estimates 1 - C, so the exported confidence is 1 - V.
        written.extend(consistency.save_confidence(1 - bundle.v, out_dir / f"{stem}_confidence", png=png_maps))
    return written


def synthesize(req: SynthesisRequest, model: Optional[ModelGraph] = None) -> tuple[list[PredictionBundle], list[Path]]:
    """Run one branch over the input image (or every PNG in an input folder)."""
    if model is None:
        model = trainer.load_model(req.checkpoint)
    req.out_dir.mkdir(parents=True, exist_ok=True)
    bundles, written = [], []
    for path in input_images(req.input_path):
        image = load_input(path)
        padded, size = pad_to_multiple(image)
        with torch.no_grad():
            bundle = crop_bundle(model.predict(padded, req.direction), size)
        bundles.append(bundle)
        written.extend(write_bundle(bundle, path.stem, req.out_dir, req.outputs, req.png_maps))
        print(f"✅ {path.name} → {req.direction.value}, {len(written)} files so far")
    return bundles, written


def interpolate(req: InterpolationRequest, model: Optional[ModelGraph] = None) -> tuple[list[PredictionBundle], list[Path]]:
    """Frames along the baseline: warp with alpha·d, then refine, merge and blend."""
    if model is None:
        model = trainer.load_model(req.checkpoint)
    req.out_dir.mkdir(parents=True, exist_ok=True)
    image = load_input(req.input_path)
    padded, size = pad_to_multiple(image)
    stem = req.input_path.stem

    frames, written = [], []
    with torch.no_grad():
        disparity = model.disparity(padded, req.direction)
        for i, alpha in enumerate(req.alphas):
            bundle = crop_bundle(model.branch_from_disparity(padded, alpha * disparity, req.direction), size)
            frames.append(bundle)
            path = req.out_dir / f"{stem}_alpha_{i:03d}_{alpha:.3f}.png"
            written.append(image_io.write_png(datapipe.denormalize(bundle.blended), path))
            print(f"🎞️  alpha {alpha:.3f} → {path.name}")
    return frames, written


def confidence_for_pair(left_path: Path, right_path: Path, model: ModelGraph, out_dir: Path,
                        gamma: float = consistency.DEFAULT_GAMMA, threshold: float = 0.5) -> list[Path]:
    """C_LR, C_RL and their occlusion masks for one stereo pair."""
    left, right = load_input(left_path), load_input(right_path)
    if left.shape != right.shape:
        raise ValueError(f"left {tuple(left.shape)} and right {tuple(right.shape)} differ in size")
    left_p, size = pad_to_multiple(left)
    right_p, _ = pad_to_multiple(right)
    with torch.no_grad():
        d_lr = model.disparity(left_p, WarpDirection.LEFT_TO_RIGHT)
        d_rl = model.disparity(right_p, WarpDirection.RIGHT_TO_LEFT)
        c_lr, c_rl = consistency.confidence_maps(d_lr, d_rl, consistency.ConsistencyParams(gamma))
    h, w = size
    stem = Path(left_path).stem
    written = []
    for name, c in (("lr", c_lr), ("rl", c_rl)):
        c = c[..., :h, :w]
        written.extend(consistency.save_confidence(c, out_dir / f"{stem}_c_{name}"))
        written.append(consistency.save_mask(consistency.occlusion_mask(c, threshold),
                                             out_dir / f"{stem}_occlusion_{name}.png"))
    return written


def parse_alphas(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--alphas expects comma-separated numbers, got {text!r}")


def parse_outputs(text: str) -> frozenset[str]:
    kinds = frozenset(k.strip() for k in text.split(",") if k.strip())
    unknown = kinds - set(OUTPUT_KINDS)
    if unknown or not kinds:
        raise argparse.ArgumentTypeError(f"--outputs takes a subset of {','.join(OUTPUT_KINDS)}")
    return kinds


def cli_overrides(args) -> list[str]:
    """Config overrides from command-line flags; ``--set`` comes first so dedicated flags win."""
    overrides = list(args.set or [])
    if getattr(args, "data_root", None):
        overrides.append(f"data.root={args.data_root}")
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    if args.deterministic:
        overrides.append("train.deterministic=true")
    if getattr(args, "schedule", None):
        overrides.append(f"train.schedule={args.schedule}")
    if getattr(args, "max_epochs", None) is not None:
        overrides.append(f"train.max_epochs={args.max_epochs}")
    if getattr(args, "max_steps", None) is not None:
        overrides.append(f"train.max_steps={args.max_steps}")
    if getattr(args, "encoder_weights", None):
        overrides.append(f"train.encoder_weights={args.encoder_weights}")
    return overrides


def cmd_train(args) -> int:
    cfg = args.cfg
    index = datapipe.load_dataset(config_module.dataset_spec(cfg))
    model = build_model(cfg.train.seed, cfg.train.encoder_weights)
    previous = None
    if args.checkpoint:
        checkpoint_dir = trainer.find_checkpoint_dir(args.checkpoint)
        if checkpoint_dir is None:
            raise trainer.TrainingError(f"No completed checkpoint under {args.checkpoint}")
        previous = trainer.load_checkpoint(checkpoint_dir, model)
        print(f"📁 Starting from {checkpoint_dir} (phases done: {', '.join(previous.phases_done) or 'none'})")

    base = config_module.train_config(cfg, progress=not args.no_progress)
    if args.phase == "all":
        configs = trainer.build_schedule(cfg.train.schedule, base)
    else:
        phase = trainer.Phase.parse(args.phase)
        configs = tuple(replace(base, phase=p, end_to_end=args.end_to_end) if p is phase else None
                        for p in trainer.Phase)

    out_dir = Path(args.out)
    config_module.save_config(cfg, out_dir / "config.txt")
    final = trainer.run_schedule(model, index, *configs, out_dir=out_dir, previous=previous)
    print(f"\n✅ Training done ({', '.join(final.phases_done)}). Checkpoints in: {out_dir}")
    return 0


def cmd_synthesize(args) -> int:
    req = SynthesisRequest(input_path=args.input, checkpoint=args.checkpoint, out_dir=args.out,
                           direction=args.direction, outputs=args.outputs, png_maps=args.png_maps)
    _, written = synthesize(req, trainer.load_model(req.checkpoint, args.cfg.train.seed))
    print(f"\n📁 Wrote {len(written)} files to {req.out_dir}")
    return 0


def cmd_interpolate(args) -> int:
    req = InterpolationRequest(input_path=args.input, checkpoint=args.checkpoint, out_dir=args.out,
                               direction=args.direction, alphas=args.alphas)
    _, written = interpolate(req, trainer.load_model(req.checkpoint, args.cfg.train.seed))
    print(f"\n📁 Wrote {len(written)} frames to {req.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    if args.checkpoint:
        if args.pred or args.gt or args.mask:
            raise ValueError("evaluate takes either --checkpoint (with a dataset) or --pred/--gt, not both")
        spec = config_module.dataset_spec(args.cfg)
        entries = datapipe.load_dataset(spec).entries(args.split)
        model = trainer.load_model(args.checkpoint, args.cfg.train.seed)
        workers = 0 if args.cfg.train.deterministic else args.workers
        report = evalsuite.evaluate_model(model, entries, spec.eval_crop, args.direction, workers=workers)
    elif args.pred and args.gt:
        report = evalsuite.evaluate_directory(args.pred, args.gt, args.mask, workers=args.workers)
    else:
        raise ValueError("evaluate needs --pred and --gt, or --checkpoint with a dataset")
    print(evalsuite.format_table(report))
    if args.records:
        path = evalsuite.write_records(report, args.records)
        print(f"\n📁 Records saved: {path}")
    return 0


def cmd_confidence(args) -> int:
    model = trainer.load_model(args.checkpoint, args.cfg.train.seed)
    gamma = args.gamma if args.gamma is not None else args.cfg.consistency.gamma
    out_dir = Path(args.out)
    written = confidence_for_pair(Path(args.left), Path(args.right), model, out_dir, gamma, args.threshold)
    print(f"📁 Wrote {len(written)} files to {out_dir}")
    return 0


def cmd_inspect(args) -> int:
    seed = args.cfg.train.seed
    model = trainer.load_model(args.checkpoint, seed) if args.checkpoint else build_model(seed)
    for name in ("encoder", "decoder_lr", "refiner_l", "cbm_l"):
        print(layer_table(getattr(model, name)))
        print()
    print(f"{'component':<12} {'parameters':>12}")
    for name, component in model.components().items():
        print(f"{name:<12} {count_parameters(component):>12,}")
    dbp = sum(count_parameters(getattr(model, n)) for n in COMPONENT_GROUPS["dbp"])
    print(f"{'dbp':<12} {dbp:>12,}")
    print(f"{'total':<12} {count_parameters(model):>12,}")
    return 0


def common_parser() -> argparse.ArgumentParser:
    """Flags every subcommand accepts."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Config file (key = value lines)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Config override, e.g. train.lr=0.0002")
    common.add_argument("--deterministic", action="store_true", help="Deterministic algorithms, single-process loading")
    common.add_argument("--seed", type=int, default=None, help="Random seed (default: from config, 0)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Monocular stereo view synthesis: train, synthesize, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)
    parents = [common_parser()]

    p = sub.add_parser("train", parents=parents, help="Run the training schedule")
    p.add_argument("--data-root", default=None, help="Dataset root (default: data.root or $MONOVIEW_DATA_ROOT)")
    p.add_argument("--out", default="runs/monoview", help="Output directory for checkpoints and logs")
    p.add_argument("--phase", default="all", choices=["1", "2", "3", "all"], help="Single phase or the full schedule")
    p.add_argument("--schedule", default=None, choices=sorted(trainer.SCHEDULE_VARIANTS),
                   help="Schedule variant for --phase all")
    p.add_argument("--checkpoint", default=None, help="Earlier run to continue from (needed for --phase 2/3)")
    p.add_argument("--encoder-weights", default=None, help="Pre-trained encoder weight directory")
    p.add_argument("--end-to-end", action="store_true", help="Phase 3 without freezing the DBP")
    p.add_argument("--max-epochs", type=int, default=None, help="Cap on epochs per phase")
    p.add_argument("--max-steps", type=int, default=None, help="Cap on optimizer steps per phase")
    p.add_argument("--no-progress", action="store_true", help="Hide progress bars")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", parents=parents,
                       help="Synthesize the other view of an image or a folder of images")
    p.add_argument("--checkpoint", required=True, help="Checkpoint or weight directory")
    p.add_argument("--input", required=True, help="Input PNG or folder of PNGs")
    p.add_argument("--direction", default="lr", choices=["lr", "rl"], help="lr: input is the left view")
    p.add_argument("--outputs", type=parse_outputs, default=frozenset({"view"}),
                   help=f"Comma-separated subset of {','.join(OUTPUT_KINDS)} (default: view)")
    p.add_argument("--png-maps", action="store_true", help="Also write grayscale PNG previews of float maps")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("interpolate", parents=parents, help="Intermediate views along the baseline")
    p.add_argument("--checkpoint", required=True, help="Checkpoint or weight directory")
    p.add_argument("--input", required=True, help="Input PNG")
    p.add_argument("--direction", default="lr", choices=["lr", "rl"], help="lr: input is the left view")
    p.add_argument("--alphas", type=parse_alphas, default=[0.0, 0.25, 0.5, 0.75, 1.0],
                   help="Comma-separated disparity scales in [0, 1] (default: 0,0.25,0.5,0.75,1)")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", parents=parents,
                       help="PSNR / SSIM of prediction folders, or of a model on a dataset split")
    p.add_argument("--pred", type=Path, default=None, help="Folder of predicted PNGs")
    p.add_argument("--gt", type=Path, default=None, help="Folder of ground-truth PNGs (same names)")
    p.add_argument("--mask", type=Path, default=None, help="Folder of disocclusion masks (nonzero = disoccluded)")
    p.add_argument("--checkpoint", default=None, help="Score this model on a dataset split instead of folders")
    p.add_argument("--data-root", default=None, help="Dataset root for --checkpoint")
    p.add_argument("--split", default="test", choices=[s.value for s in datapipe.Split],
                   help="Split scored with --checkpoint (default: test)")
    p.add_argument("--direction", default="lr", choices=["lr", "rl"], help="lr: predict the right view from the left")
    p.add_argument("--records", type=Path, default=None, help="Write per-image records (JSON lines) here")
    p.add_argument("--workers", type=int, default=0, help="Parallel workers for reading and scoring")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("confidence", parents=parents,
                       help="Left-right consistency maps and occlusion masks for a pair")
    p.add_argument("--checkpoint", required=True, help="Checkpoint or weight directory")
    p.add_argument("--left", required=True, help="Left PNG")
    p.add_argument("--right", required=True, help="Right PNG")
    p.add_argument("--gamma", type=float, default=None, help="Confidence decay rate (default: consistency.gamma)")
    p.add_argument("--threshold", type=float, default=0.5, help="Occlusion threshold on C")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("inspect", parents=parents, help="Layer tables and parameter counts")
    p.add_argument("--checkpoint", default=None, help="Checkpoint or weight directory (default: fresh model)")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        args.cfg = config_module.load_config(args.config, cli_overrides(args))
        with trainer.deterministic_mode(args.cfg.train.deterministic):
            return args.func(args)
    except (ValueError, RuntimeError, KeyError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
