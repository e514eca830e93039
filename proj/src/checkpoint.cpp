#include "stfbnn/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace stfbnn {

namespace {

constexpr int kMlpVersion = 1;

const Json& field(const Json& j, const char* key)
{
    if (!j.is_object() || !j.contains(key)) {
        throw FormatError(std::string("checkpoint: missing field '") + key + "'");
    }
    return j.at(key);
}

} // namespace

Json matrix_to_json(const Matrix& m)
{
    return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", to_row_major(m)}};
}

Matrix matrix_from_json(const Json& j)
{
    try {
        return from_row_major(field(j, "data").get<std::vector<double>>(), field(j, "rows").get<Eigen::Index>(),
                              field(j, "cols").get<Eigen::Index>());
    } catch (const Json::exception& e) {
        throw FormatError(std::string("checkpoint: bad matrix: ") + e.what());
    }
}

Json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from_json(const Json& j)
{
    try {
        const auto data = j.get<std::vector<double>>();
        return Eigen::Map<const Vector>(data.data(), static_cast<Eigen::Index>(data.size()));
    } catch (const Json::exception& e) {
        throw FormatError(std::string("checkpoint: bad vector: ") + e.what());
    }
}

Json mlp_to_json(const Mlp& model)
{
    Json layers = Json::array();
    for (const auto& l : model.layers()) {
        layers.push_back({{"in", l.in_dim()},
                          {"out", l.out_dim()},
                          {"activation", to_string(l.activation)},
                          {"weight", matrix_to_json(l.weight)},
                          {"bias", vector_to_json(l.bias)}});
    }
    return Json{{"format", "stfbnn-mlp"}, {"version", kMlpVersion}, {"layers", layers}};
}

Mlp mlp_from_json(const Json& j)
{
    if (field(j, "format") != "stfbnn-mlp") {
        throw FormatError("checkpoint: not an stfbnn-mlp container");
    }
    if (field(j, "version") != kMlpVersion) {
        throw FormatError("checkpoint: unsupported version " + field(j, "version").dump());
    }
    std::vector<DenseLayer> layers;
    for (const auto& jl : field(j, "layers")) {
        DenseLayer l;
        l.weight = matrix_from_json(field(jl, "weight"));
        l.bias = vector_from_json(field(jl, "bias"));
        l.activation = activation_from_string(field(jl, "activation").get<std::string>());
        if (field(jl, "in").get<Eigen::Index>() != l.in_dim() || field(jl, "out").get<Eigen::Index>() != l.out_dim()) {
            throw FormatError("checkpoint: layer dims disagree with weight shape");
        }
        layers.push_back(std::move(l));
    }
    try {
        return Mlp(std::move(layers));
    } catch (const InputError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    } catch (const DimensionError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
}

void write_json(const std::filesystem::path& path, const Json& j)
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

Json read_json(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_mlp(const std::filesystem::path& path, const Mlp& model) { write_json(path, mlp_to_json(model)); }

Mlp load_mlp(const std::filesystem::path& path) { return mlp_from_json(read_json(path)); }

std::string json_digest(const Json& j)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

} // namespace stfbnn
