// Random objective instances for oracle comparisons and gradient checks.
#pragma once

#include "rfk/fineflow.hpp"

#include "synth.hpp"

namespace rfk::testing {

struct LossInstance {
    Image src, tgt;
    FlowField flow_st, flow_ts;
    MatchabilityMap m_st, m_ts;
};

/// Per-pixel random flows (displacements within +-max_disp, a few invalid
/// entries) and random masks on images of the given size.
LossInstance random_loss_instance(Rng64& rng, int w, int h, int channels, double max_disp = 2.5,
                                  double invalid_fraction = 0.05);

/// Random coarse parameters (displacements within +-max_disp, logits in
/// [-1, 3]) for a pair of smooth random images.
fineflow::GradientCheckInstance random_gradient_instance(Rng64& rng, int w, int h, int channels,
                                                         double max_disp = 1.5);

}  // namespace rfk::testing
