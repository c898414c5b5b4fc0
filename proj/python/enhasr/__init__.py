"""Speech-enhancement-assisted RNN-T: DSP, lattice loss, metrics."""

from enhasr._core import (
    DataError,
    NumericError,
    dcrn_stage_chain,
    enhance,
    istft,
    kl_consistency,
    logmel,
    lr_at,
    mix_at_snr,
    normalize_utterance,
    rnnt_loss,
    si_snr,
    stft,
    synth_corpus,
    synth_noise,
    wer,
    werr,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "NumericError",
    "dcrn_stage_chain",
    "enhance",
    "istft",
    "kl_consistency",
    "logmel",
    "lr_at",
    "mix_at_snr",
    "normalize_utterance",
    "rnnt_loss",
    "si_snr",
    "stft",
    "synth_corpus",
    "synth_noise",
    "wer",
    "werr",
]
