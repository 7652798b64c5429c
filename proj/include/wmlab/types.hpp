#pragma once

#include <vector>

namespace wmlab {

struct ActionSpace {
  bool discrete = true;
  int n = 2;            // discrete action count
  int dim = 0;          // continuous action dimensions
  double lo = -1.0;
  double hi = 1.0;
};

struct Action {
  int idx = 0;              // discrete index, or candidate index during search
  std::vector<double> vec;  // continuous action vector
};

struct StepResult {
  std::vector<double> obs;
  double reward = 0.0;
  bool done = false;
  bool truncated = false;  // done by horizon, not by reaching a terminal state
};

}  // namespace wmlab
