"""convnmt: sequence-to-sequence translation with convolutional, pooling and
LSTM encoders, beam-search decoding, and a single-thread CPU benchmark, all on
a minimal dense-tensor reverse-mode autodiff core."""

__version__ = "0.1.0"
