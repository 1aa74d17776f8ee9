"""Pydantic models for experiment configuration, records and API payloads."""

import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from core.errors import ConfigError

Strategy = Literal["fedavg", "fedprox", "isfa"]


class _Section(BaseModel):
    """Base for configuration sections: immutable, unknown keys rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)


class ScheduleConfig(_Section):
    """Linear diffusion variance schedule."""

    T_steps: int = Field(50, gt=0, description="Number of diffusion steps")
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0, description="First beta")
    beta_end: float = Field(0.02, gt=0.0, lt=1.0, description="Last beta")

    @model_validator(mode="after")
    def _ordered(self) -> "ScheduleConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class ModelConfig(_Section):
    """Denoiser architecture, adapter rank and optional central pre-training."""

    hidden_width: int = Field(64, gt=0, description="Hidden width of the per-frame perceptron")
    rank: int = Field(4, gt=0, description="LoRA rank r")
    time_embed_dim: int = Field(8, ge=2, description="Sinusoidal timestep embedding size")
    backbone_init_scale: float = Field(1.0, gt=0.0, description="Gain of the Gaussian backbone init")
    pretrain_steps: int = Field(0, ge=0, description="Central pre-training steps on the public pool")
    pretrain_learning_rate: float = Field(0.05, ge=0.0, description="Pre-training step size")
    pretrain_batch_size: int = Field(8, gt=0, description="Pre-training batch size")

    @model_validator(mode="after")
    def _even_embedding(self) -> "ModelConfig":
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        return self


class LossWeights(_Section):
    """Weights of the auxiliary terms in the client objective."""

    lambda_tdc: float = Field(0.1, ge=0.0, description="Temporal-denoising consistency weight")
    lambda_id: float = Field(0.1, ge=0.0, description="Identity loss weight")
    lambda_perc: float = Field(0.05, ge=0.0, description="Perceptual loss weight")
    lambda_sync: float = Field(0.05, ge=0.0, description="Sync-proxy loss weight")


class WorldConfig(_Section):
    """Synthetic non-IID world generation parameters."""

    num_clients: int = Field(20, gt=0, description="Number of clients K")
    identities_per_client: int = Field(2, gt=0, description="Disjoint identities held by each client")
    clips_per_client: int = Field(16, ge=2, description="Clips generated per client (at least one train and one validation)")
    frames: int = Field(8, ge=2, description="Frames F per clip")
    latent_dim: int = Field(16, gt=0, description="Latent dims D per frame")
    cond_dim: int = Field(4, gt=0, description="Conditioning dims E_c")
    id_dim: int = Field(8, gt=0, description="Identity embedding dims E_id")
    feature_dim: int = Field(16, gt=0, description="Perceptual probe feature dims")
    sigma_data: float = Field(0.05, ge=0.0, description="Per-coordinate frame noise std")
    motion_scale: float = Field(1.0, ge=0.0, description="Scale of conditioning-driven motion")
    cond_drift: float = Field(0.5, ge=0.0, description="Random-walk step std of the conditioning (0 = constant)")
    validation_fraction: float = Field(0.25, gt=0.0, lt=1.0, description="Trailing share of clips held out")
    unreliable_fraction: float = Field(0.0, ge=0.0, le=1.0, description="Share of clients with shuffled identity labels")
    public_identities: int = Field(4, ge=0, description="Identities in the public pre-training pool")
    public_clips: int = Field(32, ge=0, description="Clips in the public pre-training pool")

    @model_validator(mode="after")
    def _probe_fits(self) -> "WorldConfig":
        if self.id_dim > self.latent_dim:
            raise ValueError("id_dim must not exceed latent_dim")
        return self


class LocalTrainConfig(_Section):
    """Client-side optimization settings."""

    local_epochs: int = Field(1, ge=1, description="Local epochs E")
    batch_size: int = Field(4, gt=0, description="Clips per mini-batch")
    learning_rate: float = Field(0.1, ge=0.0, description="Gradient-descent step size (0 freezes the adapters)")
    prox_mu: float = Field(0.01, ge=0.0, description="FedProx coefficient, used by the fedprox strategy")
    loss_weights: LossWeights = Field(default_factory=LossWeights, description="Objective weights")


class DpConfig(_Section):
    """Client-level differential privacy."""

    enabled: bool = Field(False, description="Clip and noise client updates")
    clip_norm: float = Field(1.0, gt=0.0, description="L2 clipping norm C")
    noise_multiplier: float = Field(0.0, ge=0.0, description="Noise multiplier sigma")


class SamplerConfig(_Section):
    """Reverse-diffusion sampler used for generation and evaluation."""

    num_steps: int = Field(10, ge=1, description="Reverse steps (respaced when below T_steps)")
    stochastic: bool = Field(True, description="Add ancestral noise")
    seed: int = Field(0, ge=0, description="Seed used when no generator is supplied")


class FederationConfig(_Section):
    """Server-side round protocol."""

    rounds: int = Field(100, gt=0, description="Communication rounds T")
    client_fraction: float = Field(0.5, gt=0.0, le=1.0, description="Client fraction p")
    strategy: Strategy = Field("isfa", description="Aggregation strategy")
    gamma: float = Field(5.0, ge=0.0, description="ISFA sharpness")
    eta: float = Field(1.0, gt=0.0, description="Server update scale")
    alpha_mix: float = Field(0.5, ge=0.0, le=1.0, description="Reliability mixing between identity and temporal terms")
    secure_agg: bool = Field(False, description="Pairwise-masked uploads")
    dropout_rate: float = Field(0.0, ge=0.0, lt=1.0, description="Probability a reporting client drops before its upload lands")
    num_workers: int = Field(1, ge=1, description="Client worker threads per round")
    eval_budget: int = Field(8, ge=1, description="Validation clips evaluated per round")
    reliability_steps: int = Field(10, ge=1, description="Reverse steps used for reliability scoring")
    dp: DpConfig = Field(default_factory=DpConfig, description="Client-level DP")


class ExperimentConfig(BaseSettings):
    """Complete, validated description of one experiment.

    Sources from lowest to highest priority: TOML file, ``FEDTALK_`` environment
    variables (``__`` separates sections), explicit overrides.
    """

    seed: int = Field(0, ge=0, description="Run seed")
    output_dir: str = Field("runs/default", description="Run directory")
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    world: WorldConfig = Field(default_factory=WorldConfig)
    local: LocalTrainConfig = Field(default_factory=LocalTrainConfig)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)

    model_config = SettingsConfigDict(
        env_prefix="FEDTALK_",
        env_nested_delimiter="__",
        extra="forbid",
        frozen=True,
        protected_namespaces=(),
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return init_settings, env_settings, TomlConfigSettingsSource(settings_cls)

    @model_validator(mode="after")
    def _cross_section(self) -> "ExperimentConfig":
        if self.sampler.num_steps > self.schedule.T_steps:
            raise ValueError("sampler.num_steps must not exceed schedule.T_steps")
        if self.federation.reliability_steps > self.schedule.T_steps:
            raise ValueError("federation.reliability_steps must not exceed schedule.T_steps")
        return self

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        """Load a config file, apply env and explicit overrides, validate.

        Args:
            path: TOML file, or None for defaults plus overrides
            overrides: Nested mapping of section -> key -> value

        Returns:
            The validated configuration

        Raises:
            ConfigError: If the file is missing, malformed or invalid
        """
        source_text = ""
        if path is not None:
            file_path = Path(path)
            if not file_path.is_file():
                raise ConfigError("config file not found", path=str(path))
            source_text = file_path.read_text(encoding="utf-8")
            try:
                tomllib.loads(source_text)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"malformed TOML: {e}", path=str(path), line=getattr(e, "lineno", 0) or 0)

        bound = type(cls.__name__, (cls,), {"model_config": SettingsConfigDict(toml_file=path)})
        try:
            loaded = bound(**(overrides or {}))
            return cls.model_validate(loaded.model_dump())
        except ValidationError as e:
            first = e.errors()[0]
            loc = tuple(str(part) for part in first["loc"])
            line = locate_key(source_text, loc) if source_text else 0
            raise ConfigError(f"{'.'.join(loc) or '<root>'}: {first['msg']}", path=str(path or "<overrides>"), line=line)

    def privacy_report(self) -> Dict[str, Any]:
        """Quantities an external (epsilon, delta) accountant needs."""
        k = self.world.num_clients
        sampled = sample_size(k, self.federation.client_fraction)
        return {
            "dp_enabled": self.federation.dp.enabled,
            "clip_norm": self.federation.dp.clip_norm,
            "noise_multiplier": self.federation.dp.noise_multiplier,
            "client_fraction": self.federation.client_fraction,
            "sampling_rate": sampled / k,
            "rounds": self.federation.rounds,
            "secure_agg": self.federation.secure_agg,
        }


def sample_size(num_clients: int, fraction: float) -> int:
    """Clients sampled per round: max(1, round(p*K)), halves rounded up."""
    return max(1, int(math.floor(fraction * num_clients + 0.5)))


def locate_key(source: str, loc: Tuple[str, ...]) -> int:
    """Find the 1-based line of ``loc`` (section path then key) in TOML text.

    Returns the section header line when the key itself is absent, or 0.
    """
    if not loc:
        return 0
    *sections, key = loc
    wanted = ".".join(sections)
    current = ""
    header_line = 0
    for number, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line.startswith("[") and line.endswith("]"):
            current = line.strip("[]").strip()
            if current == wanted:
                header_line = number
            continue
        if current == wanted and "=" in line and line.split("=", 1)[0].strip() == key:
            return number
    return header_line


class RoundRecord(BaseModel):
    """One row of the per-round validation log."""

    model_config = ConfigDict(frozen=True)

    round: int = Field(..., ge=1, description="Communication round, starting at 1")
    val_loss: float = Field(..., description="Mean combined objective over the validation pool")
    val_identity: float = Field(..., ge=0.0, le=1.0, description="Mean identity similarity of generations")
    val_temporal: float = Field(..., gt=0.0, le=1.0, description="Mean temporal stability of generations")


class RunSummary(BaseModel):
    """Outcome of one run, as written to run_summary.json and summary tables."""

    name: str = Field(..., description="Run, strategy or variant name")
    status: Literal["ok", "failed"] = Field(..., description="Whether the run completed")
    best_round: Optional[int] = Field(None, description="Round of the minimum-val_loss checkpoint")
    val_loss: Optional[float] = Field(None, description="val_loss at the best checkpoint")
    val_identity: Optional[float] = Field(None, description="val_identity at the best checkpoint")
    val_temporal: Optional[float] = Field(None, description="val_temporal at the best checkpoint")
    world_hash: Optional[str] = Field(None, description="SHA-256 of the exported world")
    rounds_completed: int = Field(0, description="Rounds with an appended record")
    skipped_rounds: List[int] = Field(default_factory=list, description="Rounds left unaggregated")
    uploaded_bytes: int = Field(0, description="Adapter bytes uploaded over the run")
    adapter_params: int = Field(0, description="Length of the communicated adapter vector")
    backbone_params: int = Field(0, description="Frozen backbone parameter count")
    adapter_backbone_ratio: Optional[float] = Field(None, description="adapter_params / backbone_params")
    output_dir: Optional[str] = Field(None, description="Run directory")
    error: Optional[str] = Field(None, description="Failure detail")


class RunRequest(BaseModel):
    """Request to launch one run."""

    name: str = Field(..., pattern=r"^[A-Za-z0-9_.-]+$", description="Run directory name under the output root")
    config_path: Optional[str] = Field(None, description="TOML config to start from")
    overrides: Dict[str, Any] = Field(default_factory=dict, description="Nested section overrides")


class CompareRequest(RunRequest):
    """Request to run several strategies under a matched protocol."""

    strategies: List[Strategy] = Field(["fedavg", "fedprox", "isfa"], min_length=1, description="Strategies to compare")


class MetricsResponse(BaseModel):
    """Per-round metrics of a finished or running run."""

    name: str = Field(..., description="Run name")
    rows: List[RoundRecord] = Field(..., description="Metrics rows in round order")


class ErrorResponse(BaseModel):
    """Error response model."""

    detail: str = Field(..., description="Error details")
    status_code: int = Field(..., description="HTTP status code")
