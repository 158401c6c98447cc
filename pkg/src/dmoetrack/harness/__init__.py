"""Training, evaluation and analysis front end for the toy tracker."""
