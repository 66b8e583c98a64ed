"""Library packages shared by the scripts and tests."""
