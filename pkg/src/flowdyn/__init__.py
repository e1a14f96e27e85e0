"""Learning differential inverse dynamics of a cable-driven elastic rod.

Modules: rod_sim (plant), dataio (datasets), neural (networks), flowmatch
(training and sampling), rollout (evaluation), cli (command line).
"""

__version__ = "0.1.0"
