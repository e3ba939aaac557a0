# ST-SparseGCN toolkit package
