"""Point-guided human mesh reconstruction at desk scale."""
