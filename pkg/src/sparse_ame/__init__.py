"""Sparse AME estimation, knockoff selection and Shapley estimators."""
