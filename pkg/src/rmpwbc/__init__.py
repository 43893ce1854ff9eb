"""RMPflow on a null-space whole-body controller for a point-foot biped."""
