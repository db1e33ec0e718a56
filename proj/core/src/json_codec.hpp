#pragma once

// JSON codecs shared by the corpus files and the annotation service.

#include <cstddef>
#include <string>

#include "json.hpp"
#include "palmlayout/corpus.hpp"
#include "palmlayout/service.hpp"

namespace palm::detail {

RegionInstance region_from_json(const nlohmann::json& r, const std::string& where);
nlohmann::json region_to_json(const RegionInstance& r);
DocumentAnnotation document_from_json(const nlohmann::json& d, std::size_t index);
nlohmann::json document_to_json(const DocumentAnnotation& doc);
nlohmann::json revision_to_json(const AnnotationRevision& r);

}  // namespace palm::detail
