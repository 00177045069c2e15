"""Model hyperparameters and the named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

KINDS = ("mask-ctc", "sc-mask-ctc", "ar")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    vocab_size: int
    d_model: int = 64
    heads: int = 2
    ff_dim: int = 256
    kernel: int = 7
    layers: int = 4
    taps: tuple[int, ...] = ()  # 1-based layer numbers whose output is tapped
    max_frames: int = 1024  # after subsampling
    dropout: float = 0.0

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.kernel % 2 != 1:
            raise ValueError("conv kernel must be odd")
        taps = tuple(self.taps)
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap layers must be strictly increasing: {taps}")
        if taps and (taps[0] < 1 or taps[-1] >= self.layers):
            raise ValueError(f"tap layers must lie in 1..{self.layers - 1}: {taps}")
        if self.layers < 1 or self.input_dim < 1 or self.vocab_size < 1:
            raise ValueError("layers, input_dim and vocab_size must be positive")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 2
    ff_dim: int = 256
    layers: int = 2
    max_tokens: int = 256  # including the CLS / start symbol
    dropout: float = 0.0

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ValueError("decoder needs at least one layer")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    encoder: EncoderConfig
    decoder: DecoderConfig
    tap_thresholds: tuple[float, ...] = ()  # inference defaults, one per tap
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.encoder.validate()
        self.decoder.validate()
        if self.encoder.d_model != self.decoder.d_model:
            raise ValueError("encoder and decoder widths differ")
        if self.kind != "sc-mask-ctc" and self.encoder.taps:
            raise ValueError(f"{self.kind} models have no self-conditioning taps")
        if self.kind == "sc-mask-ctc" and len(self.tap_thresholds) != len(self.encoder.taps):
            raise ValueError("need one threshold per tap")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["taps"] = list(self.encoder.taps)
        d["tap_thresholds"] = list(self.tap_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"], taps=tuple(d["encoder"]["taps"]))
        return cls(kind=d["kind"], encoder=EncoderConfig(**enc), decoder=DecoderConfig(**d["decoder"]),
                   tap_thresholds=tuple(d.get("tap_thresholds", ())), extra=dict(d.get("extra", {})))


_PRESETS = {
    "desk": dict(d_model=64, heads=2, ff_dim=256, kernel=7, enc_layers=4, taps=(2,), thresholds=(0.9,),
                 dec_layers=2, dropout=0.0),
    "paper-slurp": dict(d_model=256, heads=4, ff_dim=2048, kernel=15, enc_layers=12, taps=(3, 6, 9),
                        thresholds=(0.9, 0.99, 0.999), dec_layers=6, dropout=0.1),
}
PRESETS = tuple(_PRESETS)


def preset(name: str, kind: str, vocab_size: int, input_dim: int, **overrides) -> ModelConfig:
    """Build a validated config from a named preset.

    ``overrides`` may replace any encoder/decoder field by name
    (``d_model`` and ``heads`` apply to both).
    """
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    p = dict(_PRESETS[name])
    taps = tuple(overrides.pop("taps", p["taps"])) if kind == "sc-mask-ctc" else ()
    thresholds = tuple(overrides.pop("tap_thresholds", p["thresholds"])) if kind == "sc-mask-ctc" else ()
    overrides.pop("tap_thresholds", None)
    overrides.pop("taps", None)
    enc = EncoderConfig(input_dim=input_dim, vocab_size=vocab_size, d_model=p["d_model"], heads=p["heads"],
                        ff_dim=p["ff_dim"], kernel=p["kernel"], layers=p["enc_layers"], taps=taps,
                        dropout=p["dropout"])
    dec = DecoderConfig(vocab_size=vocab_size, d_model=p["d_model"], heads=p["heads"], ff_dim=p["ff_dim"],
                        layers=p["dec_layers"], dropout=p["dropout"])
    enc_fields = {k: v for k, v in overrides.items() if k in EncoderConfig.__dataclass_fields__}
    dec_fields = {k: v for k, v in overrides.items() if k in DecoderConfig.__dataclass_fields__}
    dec_fields.update({k[4:]: v for k, v in overrides.items() if k.startswith("dec_")})
    unknown = set(overrides) - set(enc_fields) - set(dec_fields) - {k for k in overrides if k.startswith("dec_")}
    if unknown:
        raise ValueError(f"unknown model overrides: {sorted(unknown)}")
    cfg = ModelConfig(kind=kind, encoder=replace(enc, **enc_fields), decoder=replace(dec, **dec_fields),
                      tap_thresholds=thresholds)
    cfg.validate()
    return cfg
