# Retrosynthesis Engine
