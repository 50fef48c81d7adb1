# Tests for the Retrosynthesis Engine
