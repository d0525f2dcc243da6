from .mixture import ConditionedMixture, blob_mixture, from_spec, single_gaussian, smooth_signal_mixture

__all__ = ["ConditionedMixture", "blob_mixture", "from_spec", "single_gaussian", "smooth_signal_mixture"]
