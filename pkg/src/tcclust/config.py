"""Run configuration: an INI file mirroring the model, fit and synthesis settings."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .inference import MODES, FitConfig
from .model import ContractError, HyperParams
from .synthesis import SynthesisPlan


class ConfigError(ValueError):
    pass


@dataclass
class HyperSection:
    mu: str = "0.0"
    sigma0: str = "16.0"
    sigma1: str = "1.0"
    c: float = 5.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    kappa1: float = 0.001
    kappa2: float = 0.1
    thres: float = 5.0
    segment_gap: int = 100
    pixel_weight: float = 0.1
    min_cluster_size: int = 10
    purity_threshold: float = 0.7
    min_segment_frames: int = 100


@dataclass
class FitSection:
    n_sweeps: int = 200
    burn_in: int = 50
    seed: int = 0
    mode: str = "tccrp"
    online: bool = False
    online_samples_per_point: int = 1
    hyper_update_enabled: bool = True
    chains: int = 1


@dataclass
class SynthesisSection:
    mode: str = "tccrp"
    n_tracklets: int = 2000
    dim: int = 25
    seed: int = 0
    tracklet_length: int = 10
    mean_chain_length: float = 6.0
    max_chain_gap: int = 20
    overlap_rate: float = 0.05
    segment_rate: float = 0.0
    n_segments: int = 0
    jitter: float = 2.0
    min_separation: float = 10.0
    max_components: int = 0
    encoding: str = "text"


@dataclass
class PathsSection:
    data: str = ""
    result: str = ""
    truth: str = ""
    report: str = ""


@dataclass
class RunConfig:
    hyper: HyperSection = field(default_factory=HyperSection)
    fit: FitSection = field(default_factory=FitSection)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    paths: PathsSection = field(default_factory=PathsSection)

    SECTIONS = ("hyper", "fit", "synthesis", "paths")

    # -- serialization -------------------------------------------------------

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name in self.SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _fmt(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        buf.write(
            "# tcclust run configuration\n"
            "# mu / sigma0 / sigma1: a number (isotropic), a comma-separated vector,\n"
            "# or 'data' to use the feature mean / variance of the input (fit only).\n"
            "# 0 for n_segments, max_components or min_separation means unset.\n\n"
        )
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        cfg = cls()
        for name in parser.sections():
            if name not in cls.SECTIONS:
                raise ConfigError(f"{source}: unknown section [{name}] (expected one of {', '.join(cls.SECTIONS)})")
            section = getattr(cfg, name)
            known = {f.name: f for f in fields(section)}
            for key, raw in parser[name].items():
                if key not in known:
                    raise ConfigError(f"{source}: unknown key '{key}' in [{name}]; valid keys: {', '.join(known)}")
                setattr(section, key, _parse(raw, type(getattr(section, key)), f"[{name}] {key}"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.loads(text, str(path))

    # -- validation and conversion ------------------------------------------

    def validate(self) -> None:
        if self.fit.mode not in MODES:
            raise ConfigError(f"[fit] mode must be one of {', '.join(MODES)}, got '{self.fit.mode}'")
        if self.synthesis.mode not in ("tccrp", "tccrf"):
            raise ConfigError(f"[synthesis] mode must be tccrp or tccrf, got '{self.synthesis.mode}'")
        if self.synthesis.encoding not in ("text", "binary"):
            raise ConfigError("[synthesis] encoding must be text or binary")
        if self.fit.chains < 1:
            raise ConfigError("[fit] chains must be >= 1")
        # vectors are checked against the data later; here they only need a common length
        lengths = {len(getattr(self.hyper, n).split(",")) for n in ("mu", "sigma0", "sigma1")} - {1}
        if len(lengths) > 1:
            raise ConfigError("[hyper] mu, sigma0 and sigma1 vectors differ in length")
        dim = lengths.pop() if lengths else self.synthesis.dim
        try:
            self.fit_config(self.hyper_params(dim, allow_data=True))
            self.plan()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    def hyper_params(self, dim: int, Y: np.ndarray | None = None, allow_data: bool = False) -> HyperParams:
        h = self.hyper
        vecs = {}
        for name in ("mu", "sigma0", "sigma1"):
            raw = getattr(h, name).strip()
            if raw == "data":
                if Y is None:
                    if not allow_data:
                        raise ConfigError(f"[hyper] {name} = data needs input features")
                    vecs[name] = np.zeros(dim) if name == "mu" else np.ones(dim)
                    continue
                if name == "sigma1":
                    raise ConfigError("[hyper] sigma1 cannot be estimated from data")
                vecs[name] = Y.mean(axis=0) if name == "mu" else np.maximum(Y.var(axis=0), 1e-6)
                continue
            try:
                v = np.array([float(x) for x in raw.split(",")])
            except ValueError:
                raise ConfigError(f"[hyper] {name} must be a number, a comma-separated vector, or 'data'; got '{raw}'") from None
            if v.size == 1:
                v = np.full(dim, v[0])
            elif v.size != dim:
                raise ConfigError(f"[hyper] {name} has {v.size} entries but the data has dimension {dim}")
            vecs[name] = v
        scalars = {f.name: getattr(h, f.name) for f in fields(h) if f.name not in vecs}
        try:
            return HyperParams(**vecs, **scalars)
        except ContractError as exc:
            raise ConfigError(f"[hyper] {exc}") from exc

    def fit_config(self, hyper: HyperParams) -> FitConfig:
        f = self.fit
        return FitConfig(
            n_sweeps=f.n_sweeps,
            burn_in=f.burn_in,
            seed=f.seed,
            mode=f.mode,
            online=f.online,
            online_samples_per_point=f.online_samples_per_point,
            hyper_update_enabled=f.hyper_update_enabled,
            hyper=hyper,
        )

    def plan(self) -> SynthesisPlan:
        s = self.synthesis
        return SynthesisPlan(
            n_tracklets=s.n_tracklets,
            dim=s.dim,
            seed=s.seed,
            tracklet_length=s.tracklet_length,
            mean_chain_length=s.mean_chain_length,
            max_chain_gap=s.max_chain_gap,
            overlap_rate=s.overlap_rate,
            segment_rate=s.segment_rate,
            n_segments=s.n_segments or None,
            jitter=s.jitter,
            min_separation=s.min_separation or None,
            max_components=s.max_components or None,
        )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(raw: str, kind: type, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got '{raw}'") from None
