"""Run configuration: schema defaults < YAML file < command-line flags."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import voluptuous as vol
import yaml

from .data import SceneConfig, StereoSample
from .errors import ConfigError
from .geometry import (
    OUTPUT_MODES,
    AdjustmentParams,
    CameraRig,
    fit_exponent,
    normalize_depth,
)
from .loss import LossConfig
from .model import PRECISIONS, ModelConfig
from .train import TrainConfig

logger = logging.getLogger(__name__)

RUN_FILE = "run.cfg"
AUTO = "auto"


POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0))
POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
UNIT = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, max_included=False))
OPTIONAL_PATH = vol.Any(None, str)

RUN_SCHEMA = vol.Schema(
    {
        vol.Optional("seed", default=0): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("size", default=64): POSITIVE_INT,
        vol.Optional("count", default=10): POSITIVE_INT,
        vol.Optional("iterations", default=500): POSITIVE_INT,
        vol.Optional("batch", default=4): POSITIVE_INT,
        vol.Optional("lr", default=1e-3): NON_NEGATIVE,
        vol.Optional("beta1", default=0.9): UNIT,
        vol.Optional("beta2", default=0.999): UNIT,
        vol.Optional("adam_eps", default=1e-8): POSITIVE,
        vol.Optional("p", default=1.5): vol.Any(
            AUTO, vol.All(vol.Coerce(float), vol.Range(min=1.0, max=4.0))
        ),
        vol.Optional("bins", default=32): vol.All(vol.Coerce(int), vol.Range(min=8)),
        vol.Optional("alpha_z", default=1.0): NON_NEGATIVE,
        vol.Optional("alpha_p", default=1.0): NON_NEGATIVE,
        vol.Optional("projection", default=True): vol.Boolean(),
        vol.Optional("mode", default="depth"): vol.In(OUTPUT_MODES),
        vol.Optional("adjust_disparity", default=True): vol.Boolean(),
        vol.Optional("out", default="out"): str,
        vol.Optional("data", default=None): OPTIONAL_PATH,
        vol.Optional("checkpoint", default=None): OPTIONAL_PATH,
        vol.Optional("warm_start", default=None): OPTIONAL_PATH,
        vol.Optional("base_channels", default=16): POSITIVE_INT,
        vol.Optional("growth", default=16): POSITIVE_INT,
        vol.Optional("decoder_channels", default=32): POSITIVE_INT,
        vol.Optional("dilations", default=[1, 2, 3, 4]): vol.All(
            [vol.All(vol.Coerce(int), vol.Range(min=1))], vol.Length(min=1)
        ),
        vol.Optional("downscale", default=8): POSITIVE_INT,
        vol.Optional("dropout", default=0.2): UNIT,
        vol.Optional("precision", default="float32"): vol.In(sorted(PRECISIONS)),
        vol.Optional("focal_length", default=64.0): POSITIVE,
        vol.Optional("baseline", default=0.1): POSITIVE,
        vol.Optional("z_max", default=10.0): POSITIVE,
        vol.Optional("z_min", default=None): vol.Any(None, POSITIVE),
        vol.Optional("z_near", default=0.8): POSITIVE,
        vol.Optional("z_far", default=4.0): POSITIVE,
        vol.Optional("layers", default=3): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("octaves", default=3): POSITIVE_INT,
        vol.Optional("base_frequency", default=0.03125): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=0.5, min_included=False)
        ),
        vol.Optional("near_heavy", default=False): vol.Boolean(),
        vol.Optional("eval_every", default=50): POSITIVE_INT,
        vol.Optional("train_ratio", default=0.9): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False, max_included=False)
        ),
        vol.Optional("repeats", default=5): POSITIVE_INT,
        vol.Optional("bench_size", default=256): POSITIVE_INT,
        vol.Optional("kind", default="exponent"): vol.In(["exponent", "projection"]),
        vol.Optional("seeds", default=5): POSITIVE_INT,
        vol.Optional("verbose", default=False): vol.Boolean(),
    },
    extra=vol.PREVENT_EXTRA,
)


@dataclass(frozen=True)
class RunConfig:
    """Validated run settings with builders for the domain objects."""

    values: Dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def rig(self) -> CameraRig:
        return CameraRig.create(
            self["focal_length"], self["baseline"], self["z_max"], self["z_min"]
        )

    def scene(self) -> SceneConfig:
        return SceneConfig(
            seed=self["seed"],
            height=self["size"],
            width=self["size"],
            layer_count=self["layers"],
            depth_range=(self["z_near"], self["z_far"]),
            octaves=self["octaves"],
            base_frequency=self["base_frequency"],
            near_heavy=self["near_heavy"],
        )

    def model(self) -> ModelConfig:
        return ModelConfig(
            base_channels=self["base_channels"],
            growth=self["growth"],
            decoder_channels=self["decoder_channels"],
            dilation_set=tuple(self["dilations"]),
            downscale=self["downscale"],
            dropout_rate=self["dropout"],
            output_mode=self["mode"],
            precision=self["precision"],
        )

    def loss(self) -> LossConfig:
        return LossConfig(self["alpha_z"], self["alpha_p"], self["projection"])

    def adjustment(
        self, samples: Sequence[StereoSample] = (), rig: Optional[CameraRig] = None
    ) -> AdjustmentParams:
        """The configured exponent, or one fitted to ``samples`` for ``p: auto``."""
        if self["p"] != AUTO:
            return AdjustmentParams(self["p"])
        if not samples:
            raise ConfigError("p: auto needs training samples to fit the exponent")
        rig = rig or samples[0].rig
        if self["mode"] == "depth":
            values = [normalize_depth(sample.depth, rig) for sample in samples]
        else:
            values = [np.clip(sample.disparity / rig.d_max, 0.0, 1.0) for sample in samples]
        params = fit_exponent(np.concatenate([value.ravel() for value in values]), self["bins"])
        logger.info("fitted adjustment exponent p=%.2f", params.p)
        return params

    def train(
        self,
        adjustment: AdjustmentParams,
        rig: Optional[CameraRig] = None,
        out_dir: Optional[Path] = None,
    ) -> TrainConfig:
        checkpoint = self["checkpoint"]
        history = None
        if out_dir is not None:
            checkpoint = checkpoint or str(Path(out_dir) / "model.ckpt")
            history = str(Path(out_dir) / "history.jsonl")
        return TrainConfig(
            iterations=self["iterations"],
            batch_size=self["batch"],
            seed=self["seed"],
            loss=self.loss(),
            adjustment=adjustment,
            eval_every=self["eval_every"],
            checkpoint_path=checkpoint,
            warm_start=self["warm_start"],
            history_path=history,
            lr=self["lr"],
            beta1=self["beta1"],
            beta2=self["beta2"],
            eps=self["adam_eps"],
            train_ratio=self["train_ratio"],
            mode=self["mode"],
            adjust_disparity=self["adjust_disparity"],
            rig=rig,
        )

    def dump(self) -> str:
        return yaml.safe_dump(dict(self.values), sort_keys=True)

    def write(self, directory: Union[str, Path]) -> Path:
        """Write the resolved settings to ``run.cfg`` in ``directory``."""
        path = Path(directory) / RUN_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")
        return path


class RunConfigLoader:
    """Merge and validate run settings, collecting every problem found."""

    def __init__(self):
        """Initialize the loader."""
        self.errors: List[str] = []
        self.warnings: List[str] = []

    def load_file(self, path: Union[str, Path]) -> Dict[str, Any]:
        """Read a YAML mapping; problems are recorded, not raised."""
        try:
            with open(path, "r", encoding="utf-8") as handle:
                content = yaml.safe_load(handle)
        except FileNotFoundError:
            self.errors.append(f"config file not found: {path}")
            return {}
        except yaml.YAMLError as err:
            self.errors.append(f"YAML syntax error in {path}: {err}")
            return {}
        if content is None:
            self.warnings.append(f"config file {path} is empty")
            return {}
        if not isinstance(content, dict):
            self.errors.append(f"config file {path} must contain a mapping")
            return {}
        return content

    def validate(self, merged: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        try:
            values = RUN_SCHEMA(merged)
        except vol.MultipleInvalid as err:
            for problem in err.errors:
                location = ".".join(str(part) for part in problem.path) or "<root>"
                self.errors.append(f"{location}: {problem.msg}")
            return None

        if values["z_near"] >= values["z_far"]:
            self.errors.append(
                f"z_near ({values['z_near']}) must be below z_far ({values['z_far']})"
            )
        z_min = values["z_min"] if values["z_min"] is not None else values["z_max"] / 100.0
        if not z_min <= values["z_near"] or not values["z_far"] <= values["z_max"]:
            self.errors.append(
                f"scene depths [{values['z_near']}, {values['z_far']}] leave the rig "
                f"range [{z_min}, {values['z_max']}]"
            )
        downscale = values["downscale"]
        if downscale < 2 or downscale & (downscale - 1):
            self.errors.append(f"downscale must be a power of 2 >= 2, got {downscale}")
        elif values["size"] % downscale:
            self.errors.append(
                f"size {values['size']} is not divisible by downscale {downscale}"
            )
        if values["alpha_z"] + values["alpha_p"] <= 0:
            self.errors.append("alpha_z and alpha_p cannot both be zero")
        if values["alpha_p"] > 0 and not values["projection"]:
            self.warnings.append("alpha_p is ignored because projection is disabled")
        return None if self.errors else values

    def resolve(
        self,
        path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> Optional[RunConfig]:
        """Merge file values and non-None overrides, then validate."""
        merged: Dict[str, Any] = {}
        if path is not None:
            merged.update(self.load_file(path))
        for key, value in (overrides or {}).items():
            if value is not None:
                merged[key] = value
        if self.errors:
            return None
        values = self.validate(merged)
        return RunConfig(values) if values is not None else None

    def print_results(self):
        """Print collected problems."""
        if self.errors:
            print("CONFIG ERRORS:")
            for error in self.errors:
                print(f"  ❌ {error}")
            print()

        if self.warnings:
            print("CONFIG WARNINGS:")
            for warning in self.warnings:
                print(f"  ⚠️  {warning}")
            print()


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Resolve a run config or raise ConfigError listing every problem."""
    loader = RunConfigLoader()
    config = loader.resolve(path, overrides)
    if loader.errors or loader.warnings:
        loader.print_results()
    if config is None:
        raise ConfigError("; ".join(loader.errors))
    for warning in loader.warnings:
        logger.warning(warning)
    return config
