"""Service that prepares, runs and records federated experiments."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from config import settings
from core.denoiser import AdapterSet, BackboneParams, init_adapters, init_backbone, pretrain_backbone, save_adapters
from core.objectives import FrozenProbes
from core.schedule import NoiseSchedule, build_linear_schedule
from core.server import run_federation
from core.synthdata import World, generate_world, world_hash
from models.schemas import ExperimentConfig, RoundRecord, RunSummary, Strategy
from utils import CsvLog, dump_toml, read_csv_rows, write_json

logger = logging.getLogger(__name__)

METRICS_FILE = "val_metrics_all_rounds.csv"
METRICS_HEADER = ["round", "val_loss", "val_identity", "val_temporal"]
SUMMARY_HEADER = ["name", "status", "best_round", "val_loss", "val_identity", "val_temporal", "world_hash"]
ABLATION_VARIANTS = ("adapters_only", "plus_dp", "plus_isfa", "plus_tdc", "full")


@dataclass(eq=False)
class PreparedExperiment:
    """Everything a run shares with other runs of the same world and seed."""

    schedule: NoiseSchedule
    world: World
    probes: FrozenProbes
    backbone: BackboneParams
    initial_adapters: AdapterSet
    world_hash: str


def with_updates(config: ExperimentConfig, updates: Mapping[str, Any]) -> ExperimentConfig:
    """Return a revalidated copy of ``config`` with nested ``updates`` merged in."""

    def merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
        merged = dict(base)
        for key, value in extra.items():
            if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
                merged[key] = merge(merged[key], value)
            else:
                merged[key] = value
        return merged

    return ExperimentConfig.model_validate(merge(config.model_dump(), updates))


def ablation_variants(config: ExperimentConfig) -> Dict[str, ExperimentConfig]:
    """Build the five ablation configs from a base config.

    ``adapters_only`` is plain adapter federation: ISFA with gamma 0 (FedAvg
    weights), no TDC term, no DP, no masking. Each ``plus_*`` variant restores
    one component from the base config; ``full`` restores all of them.
    """
    base = config.federation
    tdc = config.local.loss_weights.lambda_tdc
    off = {
        "federation": {"strategy": "isfa", "gamma": 0.0, "secure_agg": False, "dp": {"enabled": False}},
        "local": {"loss_weights": {"lambda_tdc": 0.0}},
    }
    adapters_only = with_updates(config, off)
    return {
        "adapters_only": adapters_only,
        "plus_dp": with_updates(adapters_only, {"federation": {"secure_agg": base.secure_agg, "dp": {"enabled": True}}}),
        "plus_isfa": with_updates(adapters_only, {"federation": {"gamma": base.gamma}}),
        "plus_tdc": with_updates(adapters_only, {"local": {"loss_weights": {"lambda_tdc": tdc}}}),
        "full": with_updates(config, {"federation": {"strategy": "isfa", "dp": {"enabled": True}}}),
    }


class ExperimentService:
    """Runs experiments and manages their output directories."""

    def __init__(self, output_root: Optional[str] = None):
        """Initialize the service.

        Args:
            output_root: Directory that named runs live under
        """
        self.output_root = Path(output_root or settings.OUTPUT_ROOT)

    def run_dir(self, name: str) -> Path:
        return self.output_root / name

    def prepare(self, config: ExperimentConfig) -> PreparedExperiment:
        """Build the schedule, world, probes, backbone and initial adapters for a config."""
        schedule = build_linear_schedule(config.schedule.T_steps, config.schedule.beta_start, config.schedule.beta_end)
        world = generate_world(config.world, config.seed)
        probes = world.probes()
        m, w = config.model, config.world
        backbone = init_backbone(
            w.latent_dim, m.time_embed_dim, w.cond_dim, w.id_dim, m.hidden_width, config.seed, m.backbone_init_scale
        )
        if m.pretrain_steps and world.public_clips:
            backbone = pretrain_backbone(
                backbone, world.public_clips, schedule, m.pretrain_steps,
                m.pretrain_learning_rate, m.pretrain_batch_size, config.seed,
            )
        adapters = init_adapters(backbone, m.rank, config.seed)
        digest = world_hash(world)
        logger.info(
            "prepared world clients=%d identities=%d world_hash=%s backbone_params=%d adapter_params=%d",
            len(world.clients), len(world.identities), digest[:12], backbone.num_params, adapters.size,
        )
        return PreparedExperiment(schedule, world, probes, backbone, adapters, digest)

    def run(self, config: ExperimentConfig, name: Optional[str] = None,
            prepared: Optional[PreparedExperiment] = None) -> RunSummary:
        """Run one experiment into ``config.output_dir``.

        Failures are logged and reported as a ``failed`` summary; rows already
        appended to the metrics CSV stay on disk.

        Args:
            config: Validated experiment config
            name: Summary name, defaults to the output directory name
            prepared: Shared preparation from an earlier run of the same world

        Returns:
            The run summary, also written to run_summary.json
        """
        out = Path(config.output_dir)
        name = name or out.name
        out.mkdir(parents=True, exist_ok=True)
        self._write_resolved_config(config, out)
        summary = RunSummary(name=name, status="failed", output_dir=str(out))

        with CsvLog(out / METRICS_FILE, METRICS_HEADER) as metrics:
            try:
                prepared = prepared or self.prepare(config)
                summary = summary.model_copy(update={
                    "world_hash": prepared.world_hash,
                    "adapter_params": prepared.initial_adapters.size,
                    "backbone_params": prepared.backbone.num_params,
                    "adapter_backbone_ratio": prepared.initial_adapters.size / prepared.backbone.num_params,
                })
                result = run_federation(
                    prepared.world, prepared.backbone, prepared.initial_adapters, prepared.schedule, prepared.probes,
                    config.federation, config.local, config.sampler, config.seed,
                    on_round=lambda record: metrics.append(record.model_dump()),
                )
            except Exception as e:
                logger.exception("run=%s failed", name)
                summary = summary.model_copy(update={"error": f"{type(e).__name__}: {e}"})
                write_json(out / "run_summary.json", summary.model_dump())
                return summary

        save_adapters(result.best_adapters, out / "checkpoints" / "best.adapters")
        save_adapters(result.final_adapters, out / "checkpoints" / "final.adapters")
        best = result.best_record
        summary = summary.model_copy(update={
            "status": "ok",
            "best_round": result.best_round,
            "val_loss": best.val_loss,
            "val_identity": best.val_identity,
            "val_temporal": best.val_temporal,
            "rounds_completed": len(result.records),
            "skipped_rounds": result.skipped_rounds,
            "uploaded_bytes": 8 * result.uploaded_floats,
        })
        write_json(out / "run_summary.json", summary.model_dump())
        logger.info(
            "run=%s done best_round=%d val_loss=%.6f uploaded_bytes=%d",
            name, summary.best_round, summary.val_loss, summary.uploaded_bytes,
        )
        return summary

    def compare(self, config: ExperimentConfig, strategies: Sequence[Strategy]) -> List[RunSummary]:
        """Run each strategy on the same world and seeds; write comparison_summary.csv."""
        root = Path(config.output_dir)
        prepared = self._try_prepare(config)
        summaries = []
        for strategy in strategies:
            variant = with_updates(config, {"federation": {"strategy": strategy}, "output_dir": str(root / strategy)})
            summaries.append(self.run(variant, name=strategy, prepared=prepared))
        self._write_summary_table(root / "comparison_summary.csv", summaries)
        return summaries

    def ablate(self, config: ExperimentConfig) -> List[RunSummary]:
        """Run the five ablation variants on the same world and seeds; write ablation_summary.csv."""
        root = Path(config.output_dir)
        prepared = self._try_prepare(config)
        summaries = []
        for variant_name, variant in ablation_variants(config).items():
            variant = with_updates(variant, {"output_dir": str(root / variant_name)})
            summaries.append(self.run(variant, name=variant_name, prepared=prepared))
        self._write_summary_table(root / "ablation_summary.csv", summaries)
        return summaries

    def read_metrics(self, name: str) -> List[RoundRecord]:
        """Read the metrics CSV of a named run.

        Raises:
            FileNotFoundError: If the run has no metrics file
        """
        path = self.run_dir(name) / METRICS_FILE
        if not path.is_file():
            raise FileNotFoundError(f"no metrics for run '{name}'")
        return [RoundRecord.model_validate(row) for row in read_csv_rows(path)]

    def _try_prepare(self, config: ExperimentConfig) -> Optional[PreparedExperiment]:
        # Left to each run on failure, so every row reports it
        try:
            return self.prepare(config)
        except Exception:
            logger.exception("shared preparation failed")
            return None

    @staticmethod
    def _write_resolved_config(config: ExperimentConfig, out: Path) -> None:
        report = config.privacy_report()
        comments = ["Resolved configuration; re-running it reproduces this run.", "Privacy report:"]
        comments += [f"  {key} = {value}" for key, value in report.items()]
        (out / "resolved_config.toml").write_text(dump_toml(config.model_dump(), comments), encoding="utf-8")

    @staticmethod
    def _write_summary_table(path: Path, summaries: Sequence[RunSummary]) -> None:
        with CsvLog(path, SUMMARY_HEADER) as table:
            for summary in summaries:
                table.append(summary.model_dump())
