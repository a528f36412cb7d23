"""vit-zsl: Vision Transformer attribute regression for zero-shot learning"""
