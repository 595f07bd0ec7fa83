"""Marginal GEE models for clustered county-year panels."""
