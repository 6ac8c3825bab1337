"""Training algorithms: PPO for grid tasks, SAC with hindsight relabeling for continuous tasks."""
