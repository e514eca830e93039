#pragma once

#include "stfbnn/mlp.hpp"

#include "json.hpp"

#include <filesystem>

namespace stfbnn {

using Json = nlohmann::json;

/// Matrix as {"rows", "cols", "data"} with data in row-major order.
Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);
Json vector_to_json(const Vector& v);
Vector vector_from_json(const Json& j);

/// Versioned checkpoint container. Doubles are written in shortest
/// round-trip form, so save followed by load reproduces every bit.
Json mlp_to_json(const Mlp& model);
Mlp mlp_from_json(const Json& j);

void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

void save_mlp(const std::filesystem::path& path, const Mlp& model);
Mlp load_mlp(const std::filesystem::path& path);

/// Hex FNV-1a digest of the canonical JSON dump.
std::string json_digest(const Json& j);

} // namespace stfbnn
