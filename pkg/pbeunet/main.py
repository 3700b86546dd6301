"""PBE-UNet Main Orchestrator - Coordinates all agents behind the command line."""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from pbeunet import __version__
from pbeunet.ablation import DEFAULT_VARIANTS, AblationAgent, parse_variants
from pbeunet.checkpoint import load_checkpoint
from pbeunet.console import echo
from pbeunet.data_io import DatasetAgent, read_pgm, resize_bilinear, resize_nearest, write_pgm
from pbeunet.errors import CheckpointError, PbeError
from pbeunet.evaluator import EvaluatorAgent, predict
from pbeunet.gradcheck import GradcheckAgent
from pbeunet.models import BgfeExpansion, BgfeStage, FusionMode, GradcheckResult, RunConfig
from pbeunet.network import count_params_flops
from pbeunet.presenter import PresenterAgent
from pbeunet.tensor import Tensor
from pbeunet.trainer import HISTORY_FILE, TrainerAgent

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "data" / "default_config.json"


def load_run_config(path: Optional[str]) -> RunConfig:
    """RunConfig from a JSON file; the bundled default when no path is given."""
    source = Path(path) if path else DEFAULT_CONFIG
    if path is None and not source.exists():
        return RunConfig()
    with open(source, "r") as f:
        data = json.load(f)
    return RunConfig(**data)


def apply_overrides(run: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags take precedence over config keys."""
    data = run.model_dump(mode="json")
    model, train, synth, loss = data["model"], data["train"], data["synth"], data["loss"]
    flags = vars(args)
    for flag, section, key in (
        ("seed", train, "seed"),
        ("epochs", train, "epochs"),
        ("max_iters", train, "max_iters"),
        ("batch_size", train, "batch_size"),
        ("lr0", train, "lr0"),
        ("lambda2", loss, "lambda2"),
        ("fusion", model, "fusion_mode"),
        ("bgfe_expansion", model, "bgfe_expansion"),
        ("bgfe_stage", model, "bgfe_stage"),
        ("base_channels", model, "base_channels"),
        ("count", synth, "count"),
        ("size", synth, "size"),
    ):
        if flags.get(flag) is not None:
            section[key] = flags[flag]
    if flags.get("synth_seed") is not None:
        synth["seed"] = flags["synth_seed"]
    for module in ("bd", "bgfe", "saam"):
        if flags.get(f"no_{module}"):
            model[f"enable_{module}"] = False
    if flags.get("no_bd"):
        model["enable_bgfe"] = False
    for flag, key in (("data", "data_dir"), ("out", "out_dir")):
        if flags.get(flag) is not None:
            data[key] = str(flags[flag])
    return RunConfig(**data)


class PbeRunner:
    """Main orchestrator for the segmentation engine."""

    def __init__(self, verbose: bool = True):
        self.verbose = verbose
        self.dataset = DatasetAgent(verbose=verbose)
        self.trainer = TrainerAgent(verbose=verbose)
        self.gradchecker = GradcheckAgent(verbose=verbose)
        self.ablation = AblationAgent(verbose=verbose)

    def _say(self, message: str = "") -> None:
        if self.verbose:
            echo(message)

    def synthesize(self, run: RunConfig, out_dir: str) -> Path:
        self._say("🩺 PBE-UNet - synthetic dataset")
        self._say("=" * 60)
        samples = self.dataset.synthesize(run.synth)
        return self.dataset.write(out_dir, samples)

    def train(self, run: RunConfig, data_dir: str, out_dir: str, resume: Optional[str] = None) -> Dict[str, Any]:
        self._say("🩺 PBE-UNet - training")
        self._say("=" * 60)
        state = None
        if resume is not None:
            state = load_checkpoint(resume)
            if state.config.model != run.model:
                raise CheckpointError(f"{resume} was trained with a different model configuration")

        self._say("\n📋 Step 1: Loading dataset...")
        samples = self.dataset.load(data_dir, run.synth.size)
        train, val = self.dataset.split(samples, run.train.train_ratio, run.train.seed)
        self.dataset.write_manifest(out_dir, train, val)

        self._say("\n🏋️  Step 2: Training...")
        if state is None:
            result = self.trainer.train(run, train, val, out_dir=out_dir)
        else:
            self._say(f"   Resuming {resume} at iteration {state.iteration}")
            result = self.trainer.train(
                run, train, val, out_dir=out_dir,
                params=state.params, velocity=state.velocity, start_iteration=state.iteration,
            )

        self._say("\n📈 Step 3: Generating outputs...")
        presenter = PresenterAgent(out_dir, verbose=self.verbose)
        history = pd.read_csv(Path(out_dir) / HISTORY_FILE)
        chart_path = presenter.generate_training_curve(history)
        self._say(f"   Chart saved to: {chart_path}")

        self._say("\n" + "=" * 60)
        self._say("✨ Training complete!")
        self._say(f"📂 Results available in: {out_dir}/")
        return {
            "iterations": result.iterations,
            "final_loss": result.history[-1].loss if result.history else None,
            "best_dice": result.best_dice,
            "best_iteration": result.best_iteration,
        }

    def evaluate(self, checkpoint: str, data_dir: str, report_dir: Optional[str] = None) -> Dict[str, Any]:
        state = load_checkpoint(checkpoint)
        self._say(f"🤖 Evaluator: Checkpoint {checkpoint} at iteration {state.iteration}")
        samples = self.dataset.load(data_dir, state.config.synth.size)
        evaluator = EvaluatorAgent(batch_size=state.config.train.batch_size, verbose=self.verbose)
        reports, summary = evaluator.evaluate(state.params, state.config.model, samples)
        if report_dir is not None:
            presenter = PresenterAgent(report_dir, verbose=self.verbose)
            path = presenter.generate_metrics_report(reports, summary)
            self._say(f"   Report saved to: {path}")
        return {
            "samples": [r.model_dump(mode="json") for r in reports],
            "aggregate": summary.model_dump(mode="json"),
        }

    def predict(self, checkpoint: str, image_path: str, out_path: str, boundary_prefix: Optional[str] = None) -> None:
        state = load_checkpoint(checkpoint)
        image = read_pgm(image_path).data[0, 0].astype(np.float64)
        height, width = image.shape
        size = state.config.synth.size
        if height % 16 or width % 16:
            work = resize_bilinear(image, size, size)
        else:
            work = image
        out = predict(state.params, state.config.model, Tensor(work[None, None]))
        mask = out.mask_prob.data[0, 0] > 0.5
        if mask.shape != (height, width):
            mask = resize_nearest(mask, height, width)
        write_pgm(out_path, mask.astype(np.float64))
        self._say(f"✅ Predictor: mask written to {out_path} ({int(mask.sum())} foreground pixels)")
        if boundary_prefix is not None:
            for k, stage in enumerate(out.boundary_probs):
                write_pgm(f"{boundary_prefix}_stage{k}.pgm", stage.data[0, 0])
            self._say(f"   {len(out.boundary_probs)} boundary maps written with prefix {boundary_prefix}")

    def gradcheck(self, seed: int = 0) -> List[GradcheckResult]:
        return self.gradchecker.run(seed)

    def flops(self, run: RunConfig, size: int) -> Dict[str, int]:
        params, flops = count_params_flops(run.model, size=size, seed=run.train.seed)
        self._say(f"📊 Complexity: {params:,} parameters, {flops / 1e9:.3f} GFLOPs at {size}x{size}")
        return {"param_count": params, "flops": flops, "input_size": size}

    def ablate(
        self,
        run: RunConfig,
        out_dir: str,
        variants: Sequence[str],
        seeds: Sequence[int],
        data_dir: Optional[str] = None,
    ) -> pd.DataFrame:
        self._say("🩺 PBE-UNet - ablation")
        self._say("=" * 60)
        samples = self.dataset.load(data_dir, run.synth.size) if data_dir else None
        summary = self.ablation.run(run, variants, seeds, out_dir=out_dir, samples=samples)
        chart = PresenterAgent(out_dir, verbose=self.verbose).generate_ablation_chart(summary)
        self._say(f"   Chart saved to: {chart}")
        return summary


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, help="training seed")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--max-iters", type=int, help="iteration budget overriding --epochs")
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr0", type=float)
    parser.add_argument("--lambda2", type=float, help="boundary loss weight")
    parser.add_argument("--fusion", choices=[m.value for m in FusionMode])
    parser.add_argument("--bgfe-expansion", choices=[e.value for e in BgfeExpansion])
    parser.add_argument("--bgfe-stage", choices=[s.value for s in BgfeStage], help="where BD and BGFE sit")
    parser.add_argument("--base-channels", type=int)
    parser.add_argument("--no-bd", action="store_true", help="disable boundary detection (and the enhancement)")
    parser.add_argument("--no-bgfe", action="store_true", help="disable boundary-guided enhancement")
    parser.add_argument("--no-saam", action="store_true", help="disable scale-aware aggregation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbeunet", description="PBE-UNet lesion segmentation engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress messages")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="write a synthetic dataset")
    synth.add_argument("--config")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", dest="synth_seed", type=int)
    synth.add_argument("--count", type=int)
    synth.add_argument("--size", type=int)

    train = commands.add_parser("train", help="train on a dataset directory")
    train.add_argument("--config")
    train.add_argument("--data")
    train.add_argument("--out")
    train.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by train")
    _add_training_flags(train)

    evaluate = commands.add_parser("eval", help="score a checkpoint; JSON on stdout")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--report", help="directory for metrics_report.html")

    pred = commands.add_parser("predict", help="segment one PGM image")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--image", required=True)
    pred.add_argument("--out", required=True)
    pred.add_argument("--boundary-out", help="prefix for the stage boundary maps")

    check = commands.add_parser("gradcheck", help="finite-difference check of every backward rule")
    check.add_argument("--seed", type=int, default=0)

    flops = commands.add_parser("flops", help="parameter count and FLOPs; JSON on stdout")
    flops.add_argument("--config")
    flops.add_argument("--size", type=int, default=256)
    flops.add_argument("--base-channels", type=int)

    ablate = commands.add_parser("ablate", help="compare module variants over seeds")
    ablate.add_argument("--config")
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--data", help="dataset directory; synthesized from the config when omitted")
    ablate.add_argument("--variants", default=",".join(DEFAULT_VARIANTS))
    ablate.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    ablate.add_argument("--epochs", type=int)
    ablate.add_argument("--max-iters", type=int)
    ablate.add_argument("--count", type=int)
    ablate.add_argument("--size", type=int)
    return parser


def _run(args: argparse.Namespace) -> int:
    runner = PbeRunner(verbose=not args.quiet)
    if args.command == "synth":
        run = apply_overrides(load_run_config(args.config), args)
        runner.synthesize(run, args.out)
    elif args.command == "train":
        run = apply_overrides(load_run_config(args.config), args)
        if run.data_dir is None:
            raise PbeError("train needs --data or data_dir in the config")
        summary = runner.train(run, run.data_dir, run.out_dir or "output", args.resume)
        print(json.dumps(summary))
    elif args.command == "eval":
        print(json.dumps(runner.evaluate(args.checkpoint, args.data, args.report), indent=2))
    elif args.command == "predict":
        runner.predict(args.checkpoint, args.image, args.out, args.boundary_out)
    elif args.command == "gradcheck":
        results = runner.gradcheck(args.seed)
        for result in results:
            print(f"{result.name:<28} {result.max_rel_error:.3e} {'ok' if result.passed else 'FAIL'}")
        return 0 if all(r.passed for r in results) else 1
    elif args.command == "flops":
        run = apply_overrides(load_run_config(args.config), args)
        print(json.dumps(runner.flops(run, args.size)))
    elif args.command == "ablate":
        run = apply_overrides(load_run_config(args.config), args)
        summary = runner.ablate(run, args.out, parse_variants(args.variants), args.seeds, args.data)
        print(summary.to_csv(index=False), end="")
    return 0


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Exit code: 2 bad usage, 1 runtime failure, 0 success."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    try:
        return _run(args)
    except (PbeError, ValidationError, OSError, ValueError) as exc:
        echo(f"❌ {type(exc).__name__}: {exc}")
        return 1


def main() -> int:
    """Main entry point."""
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
