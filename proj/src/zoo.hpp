#pragma once

#include <memory>

#include "har/models.hpp"

namespace har::zoo {

std::unique_ptr<ClassicalModel> make_classical(const ModelSpec& spec);
std::unique_ptr<NeuralModel> make_neural(const ModelSpec& spec, std::uint64_t seed);

}  // namespace har::zoo
