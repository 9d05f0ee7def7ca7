// Randomised certification of the risk bounds under both JS coefficients.

#include <cstdio>

#include "edglab/divergence_lab.hpp"

using namespace edglab::divergence;

int main() {
    CertifyConfig cfg;
    cfg.bound_instances = 500;
    cfg.decomposition_instances = 5000;
    for (auto c : {JsCoefficient::InvSqrt2, JsCoefficient::Sqrt2}) {
        cfg.coefficient = c;
        const auto rep = certify(cfg);
        std::printf("%s\n", summary_markdown(rep).c_str());
    }
    return 0;
}
