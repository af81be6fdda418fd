#pragma once

#include <json.hpp>

#include "kvlab/model.hpp"

namespace kvlab {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace kvlab
