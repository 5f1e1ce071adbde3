"""aligndistil-lab: token-level distillation against an extrapolated
DPO teacher, at desk scale."""

__version__ = "1.0.0"
