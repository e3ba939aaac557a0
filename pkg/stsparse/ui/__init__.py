# Report charts package
