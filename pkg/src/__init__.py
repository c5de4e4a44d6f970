# Multi-event attention steering - main package
