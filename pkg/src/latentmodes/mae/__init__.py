"""Toy masked-autoencoder tokenizer on a numpy autodiff core."""
