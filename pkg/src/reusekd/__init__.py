"""reusekd: attention-map reuse and masked layer-to-layer distillation
for small transformer encoders, with exact parameter/MAC accounting."""

__version__ = "0.1.0"
