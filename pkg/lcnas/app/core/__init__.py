# Algorithms: ops, latency analysis, networks, search, verification, data, training
