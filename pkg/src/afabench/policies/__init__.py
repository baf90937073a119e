from .base import NoLegalFeature, Policy, RandomPolicy, greedy_select

__all__ = ["NoLegalFeature", "Policy", "RandomPolicy", "greedy_select"]
