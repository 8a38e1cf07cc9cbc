from .audio import AudioFormatError, AudioSignal, read_wav, resample, write_wav
from .augment import AugmentSpec, NoiseEvent, convolve_rir, mix_noise_at_snr, snr_gain
from .corpus import concat_by_session, filter_top_half_by_snr
from .features import FeatureMatrix, energy_vad, extract, logmel_fbank, sliding_cmn
from .wada import wada_snr

__all__ = [
    "AudioFormatError", "AudioSignal", "read_wav", "write_wav", "resample",
    "AugmentSpec", "NoiseEvent", "convolve_rir", "mix_noise_at_snr", "snr_gain",
    "concat_by_session", "filter_top_half_by_snr",
    "FeatureMatrix", "energy_vad", "extract", "logmel_fbank", "sliding_cmn",
    "wada_snr",
]
