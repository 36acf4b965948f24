"""anchorlift: 2D-to-3D human pose lifting through an adaptive 3D anchor space.

The pipeline turns a (noisy) 2D pose plus pyramid image features into a
root-relative 3D pose: adaptive local + fixed global 3D anchors, joint-wise
depth-bin distributions with sparse ordinal supervision, pose-prior token
sampling, outer-product feature lifting, an anchor-feature interaction
decoder with 3D deformable attention, and anchor-to-joint ensemble
prediction. A synthetic skeleton gym with controllable self-occlusion and
2D noise makes the whole thing trainable and testable on one CPU.
"""

__version__ = "0.1.0"

from . import anchors, autodiff, decoder, depthfield, ensemble, nn, pipeline, sampler, skeleton, synthgym

__all__ = [
    "anchors",
    "autodiff",
    "decoder",
    "depthfield",
    "ensemble",
    "nn",
    "pipeline",
    "sampler",
    "skeleton",
    "synthgym",
    "__version__",
]
