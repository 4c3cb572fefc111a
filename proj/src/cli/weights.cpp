// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <sstream>

#include "lopt/cli.hpp"
#include "lopt/tensor_file.hpp"

namespace lopt::cli {

LoptWeights resolve_weights(const std::optional<std::filesystem::path>& explicit_path, const std::string& feature_set,
                            std::uint64_t seed) {
    std::optional<std::filesystem::path> path = explicit_path;
    if (!path) {
        if (const char* env = std::getenv("LOPT_WEIGHTS"); env && *env) path = env;
    }
    if (path) return LoptWeights::load_from(file_load(*path));
    const auto spec = FeatureSetSpec::from_name(feature_set);
    return LoptWeights::random(LoptWeights::default_topology(spec), spec, seed);
}

std::string inspect_weights(const NamedTensorFile& file) {
    const LoptWeights w = LoptWeights::load_from(file);
    std::ostringstream os;
    os << "feature_set: " << w.feature_set << '\n';
    os << "topology:";
    const auto topo = w.topology();
    for (std::size_t i = 0; i < topo.size(); ++i) os << (i ? " -> " : " ") << topo[i];
    os << '\n';
    for (std::size_t l = 0; l < w.layers.size(); ++l)
        os << "layer " << l << ": weight " << w.layers[l].weight.rows() << 'x' << w.layers[l].weight.cols()
           << ", bias " << w.layers[l].bias.size() << '\n';
    os << "alpha: " << w.alpha << '\n' << "beta_out: " << w.beta_out << '\n';
    const auto b = w.betas.as_array();
    os << "betas: momentum " << b[0] << ' ' << b[1] << ' ' << b[2] << ", second_moment " << b[3] << ", adafactor "
       << b[4] << ' ' << b[5] << ' ' << b[6] << '\n';
    os << "update_sign: " << (w.update_sign == UpdateSign::Subtract ? "subtract" : "add") << '\n';
    return os.str();
}

void convert_weights(const std::filesystem::path& in, const std::filesystem::path& out) {
    const NamedTensorFile file = file_load(in);
    LoptWeights::load_from(file).validate();
    file_save(file, out);
}

} // namespace lopt::cli
