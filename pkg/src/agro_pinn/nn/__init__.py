"""Small differentiable sequence models with hand-written backward passes."""
