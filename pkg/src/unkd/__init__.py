"""Popularity-stratified knowledge distillation for implicit-feedback recommenders."""
