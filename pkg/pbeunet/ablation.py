"""Ablation Agent - trains named network variants over several seeds on one split."""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from pbeunet.console import echo
from pbeunet.data_io import DatasetAgent
from pbeunet.errors import PbeError
from pbeunet.evaluator import EvaluatorAgent
from pbeunet.models import BgfeExpansion, BgfeStage, FusionMode, RunConfig, Sample
from pbeunet.trainer import TrainerAgent

DEFAULT_VARIANTS = ("baseline", "bd", "bd_bgfe", "saam", "full")
FUSION_VARIANTS = ("fusion_add", "fusion_multiply", "fusion_concat", "full")
STAGE_VARIANTS = ("bgfe_stage_encoder", "bgfe_stage_both", "bgfe_stage_decoder")
METRIC_COLUMNS = ["dice", "iou", "hd95", "recall", "accuracy"]

_MODULE_SWITCHES = {
    "baseline": (False, False, False),
    "bd": (True, False, False),
    "bd_bgfe": (True, True, False),
    "saam": (False, False, True),
    "full": (True, True, True),
}


def _with_model(run: RunConfig, **update) -> RunConfig:
    model = run.model.model_validate({**run.model.model_dump(), **update})
    return run.model_copy(update={"model": model})


def variant_config(run: RunConfig, variant: str) -> RunConfig:
    """RunConfig of a named variant; every variant starts from `run`."""
    if variant in _MODULE_SWITCHES:
        bd, bgfe, saam = _MODULE_SWITCHES[variant]
        return _with_model(run, enable_bd=bd, enable_bgfe=bgfe, enable_saam=saam)
    full = variant_config(run, "full")
    if variant.startswith("fusion_"):
        return _with_model(full, fusion_mode=FusionMode(variant[len("fusion_"):]))
    if variant.startswith("bgfe_stage_"):
        return _with_model(full, bgfe_stage=BgfeStage(variant[len("bgfe_stage_"):]))
    if variant.startswith("bgfe_"):
        return _with_model(full, bgfe_expansion=BgfeExpansion(variant[len("bgfe_"):]))
    if variant.startswith("lambda2="):
        loss = full.loss.model_validate({**full.loss.model_dump(), "lambda2": float(variant[len("lambda2="):])})
        return full.model_copy(update={"loss": loss})
    raise PbeError(f"unknown ablation variant {variant!r}")


def parse_variants(text: str) -> List[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    for name in names:
        try:
            variant_config(RunConfig(), name)
        except ValueError as exc:
            raise PbeError(f"unknown ablation variant {name!r}") from exc
    return names


class AblationAgent:
    """Agent responsible for comparing network variants under one protocol."""

    def __init__(self, verbose: bool = True):
        self.verbose = verbose
        self.trainer = TrainerAgent(verbose=False)

    def _say(self, message: str) -> None:
        if self.verbose:
            echo(message)

    def run(
        self,
        run: RunConfig,
        variants: Sequence[str] = DEFAULT_VARIANTS,
        seeds: Sequence[int] = (0, 1, 2),
        out_dir: Optional[Union[str, Path]] = None,
        samples: Optional[Sequence[Sample]] = None,
    ) -> pd.DataFrame:
        """Per-variant means over seeds; writes ablation.csv and ablation_runs.csv under `out_dir`."""
        dataset = DatasetAgent(verbose=self.verbose)
        if samples is None:
            samples = dataset.synthesize(run.synth)
        train, val = dataset.split(samples, run.train.train_ratio, run.train.seed)
        evaluator = EvaluatorAgent(batch_size=run.train.batch_size, verbose=False)
        configs: Dict[str, RunConfig] = {name: variant_config(run, name) for name in variants}

        rows = []
        for name, config in configs.items():
            for seed in seeds:
                seeded = config.model_copy(update={"train": config.train.model_copy(update={"seed": seed})})
                self._say(f"🤖 Ablation Agent: Training {name} (seed {seed})")
                result = self.trainer.train(seeded, train)
                _, summary = evaluator.evaluate(result.params, seeded.model, val)
                rows.append({
                    "variant": name,
                    "seed": seed,
                    "dice": summary.dice,
                    "iou": summary.iou,
                    "hd95": np.nan if summary.hd95 is None else summary.hd95,
                    "recall": summary.recall,
                    "accuracy": summary.accuracy,
                    "final_loss": result.history[-1].loss,
                })
                self._say(f"   {name} seed {seed}: Dice {summary.dice:.4f}")

        runs = pd.DataFrame(rows)
        summary = summarize(runs, list(configs))
        if out_dir is not None:
            out_path = Path(out_dir)
            out_path.mkdir(parents=True, exist_ok=True)
            runs.to_csv(out_path / "ablation_runs.csv", index=False)
            summary.to_csv(out_path / "ablation.csv", index=False)
        self._say("✅ Ablation Agent: Completed")
        for _, row in summary.iterrows():
            self._say(f"   {row['variant']:<16} Dice {row['dice']:.4f} ± {row['dice_std']:.4f}")
        return summary


def summarize(runs: pd.DataFrame, order: Optional[Sequence[str]] = None) -> pd.DataFrame:
    grouped = runs.groupby("variant", sort=False)
    summary = grouped[METRIC_COLUMNS].mean()
    summary["dice_std"] = grouped["dice"].std(ddof=0)
    summary["seeds"] = grouped["seed"].count()
    summary = summary.reset_index()
    if order is not None:
        summary = summary.set_index("variant").loc[list(order)].reset_index()
    return summary

