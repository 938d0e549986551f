"""Fusor math, encoder views, training and analysis tools."""
