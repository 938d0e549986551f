"""aesfusor: instruction-guided multi-view vision fusor and aesthetic data pipelines."""
