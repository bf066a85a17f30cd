// Builds one search collage, simulates gaze on it and writes the collage and
// its fixation density map as PGM files into the current directory.

#include <cstdio>

#include "gazedecode/gaze_sim.hpp"
#include "gazedecode/stimuli.hpp"

using namespace gazedecode;

int main() {
  const Collage collage = build_collage(CategoryId::from_name("Dress"), 2, /*seed=*/42);
  const FixationLog log = simulate_search(collage, SearchParams{}, /*seed=*/7);

  FdmParams fdm_params;
  fdm_params.sigma = 20.0;
  const FixationDensityMap fdm = build_fdm(log, fdm_params);

  Tensor heat = fdm.grid;
  float peak = 0.0f;
  for (float v : heat.data()) peak = std::max(peak, v);
  for (float& v : heat.data()) v /= peak;

  write_file("collage.pgm", export_pgm(collage.canvas));
  write_file("fdm.pgm", export_pgm(heat));
  std::printf("%zu fixations on a %s search, first at (%.1f, %.1f) for %.0f ms\n",
              log.fixations.size(), std::string(log.target.name()).c_str(), log.fixations[0].x,
              log.fixations[0].y, log.fixations[0].t);
}
