#pragma once

#include <json.hpp>

#include "stackunet/model.hpp"
#include "stackunet/preprocess.hpp"

namespace stackunet {

struct TrainConfig;

nlohmann::json cascade_spec_to_json(const CascadeSpec& spec);

/// Parses a cascade spec, applying defaults for absent keys. Unknown keys are rejected.
CascadeSpec cascade_spec_from_json(const nlohmann::json& j);

nlohmann::json augment_spec_to_json(const AugmentSpec& spec);
AugmentSpec augment_spec_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace stackunet
