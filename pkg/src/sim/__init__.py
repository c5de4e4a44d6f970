# Toy cross-attention simulator
