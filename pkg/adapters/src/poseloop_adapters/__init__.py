"""Reference backend processes for the poseloop wire protocol.

Each adapter wraps one model kind (detector, pose estimator, promptable
segmenter) behind the stdio protocol. Engines range from dependency-free
classical CV (HOG people detector, GrabCut) to TorchScript checkpoints and
the sam2 package. See ``python -m poseloop_adapters --help``.
"""

__version__ = "0.1.0"
