"""Flow-guided bidirectional RGB-event registration for semantic segmentation.

Desk-scale, deterministic, CPU-only. Subpackages follow the pipeline:
tensor/nn (autodiff kernel), events (event data + representations),
synth (ground-truth scene generator), flow (warping, providers, probes),
met / registration / fusion (the module chain), model (training),
analysis (measurement instruments), cli (batch entry point).
"""

__version__ = "0.1.0"
