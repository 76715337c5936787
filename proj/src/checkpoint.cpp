#include "capsprune/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "capsprune/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace capsprune {

using nlohmann::json;

nlohmann::json config_to_json(const CapsNetConfig& c) {
    return json{{"image_size", c.image_size},
                {"image_channels", c.image_channels},
                {"conv1_filters", c.conv1_filters},
                {"kernel", c.kernel},
                {"conv2_capsule_types", c.conv2_capsule_types},
                {"pc_dim", c.pc_dim},
                {"out_caps_dim", c.out_caps_dim},
                {"num_classes", c.num_classes},
                {"routing_iters", c.routing_iters},
                {"m_plus", c.m_plus},
                {"m_minus", c.m_minus},
                {"lambda_down", c.lambda_down},
                {"recon_weight", c.recon_weight},
                {"decoder_hidden", c.decoder_hidden}};
}

CapsNetConfig config_from_json(const nlohmann::json& j) {
    CapsNetConfig c;
    try {
        c.image_size = j.at("image_size").get<int>();
        c.image_channels = j.at("image_channels").get<int>();
        c.conv1_filters = j.at("conv1_filters").get<int>();
        c.kernel = j.at("kernel").get<int>();
        c.conv2_capsule_types = j.at("conv2_capsule_types").get<int>();
        c.pc_dim = j.at("pc_dim").get<int>();
        c.out_caps_dim = j.at("out_caps_dim").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
        c.routing_iters = j.at("routing_iters").get<int>();
        c.m_plus = j.at("m_plus").get<float>();
        c.m_minus = j.at("m_minus").get<float>();
        c.lambda_down = j.at("lambda_down").get<float>();
        c.recon_weight = j.at("recon_weight").get<float>();
        c.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad config metadata: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw LengthError(std::string("checkpoint truncated while reading ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    void floats(float* dst, size_t n, const char* what) {
        need(n * 4, what);
        std::memcpy(dst, buf.data() + pos, n * 4);
        pos += n * 4;
    }
};

}  // namespace

void save_checkpoint(const CapsNetModel& model, const std::string& path, int epoch,
                     float accuracy) {
    model.validate();

    json meta;
    meta["config"] = config_to_json(model.config);
    meta["survivors"] = model.survivors;
    meta["epoch"] = epoch;
    meta["accuracy"] = accuracy;
    const std::string meta_text = meta.dump();

    std::string out;
    out.append("PCPR", 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
    out.append(meta_text);

    const auto named = model.named_parameters();
    put_u32(out, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put_u32(out, static_cast<std::uint32_t>(t->rank()));
        for (int d : t->shape) put_u32(out, static_cast<std::uint32_t>(d));
        const size_t bytes = t->data.size() * 4;
        const size_t off = out.size();
        out.resize(off + bytes);
        std::memcpy(out.data() + off, t->data.data(), bytes);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    Reader r{buf};
    if (r.bytes(4, "magic") != "PCPR") throw BadMagicError(path + ": not a PCPR checkpoint");
    const std::uint32_t version = r.u32("version");
    if (version < 1 || version > kCheckpointVersion)
        throw VersionError(path + ": unsupported checkpoint version " +
                           std::to_string(version));

    const std::uint32_t meta_len = r.u32("metadata length");
    const std::string meta_text = r.bytes(meta_len, "metadata");
    json meta;
    try {
        meta = json::parse(meta_text);
    } catch (const json::exception& e) {
        throw ParseError(path + ": bad metadata JSON: " + e.what());
    }

    LoadedCheckpoint out;
    out.model.config = config_from_json(meta.at("config"));
    try {
        out.model.survivors = meta.at("survivors").get<std::vector<int>>();
        out.epoch = meta.at("epoch").get<int>();
        out.accuracy = meta.at("accuracy").get<float>();
    } catch (const json::exception& e) {
        throw ParseError(path + ": bad metadata fields: " + e.what());
    }

    const std::uint32_t n_tensors = r.u32("tensor count");
    std::vector<std::pair<std::string, TensorPtr>> loaded;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::uint32_t name_len = r.u32("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank > 8) throw LengthError(path + ": implausible tensor rank");
        std::vector<int> shape(rank);
        std::int64_t total = 1;
        for (auto& d : shape) {
            d = static_cast<int>(r.u32("tensor dims"));
            total *= d;
        }
        auto t = Tensor::make(shape);
        t->requires_grad = true;
        r.floats(t->data.data(), static_cast<size_t>(total), name.c_str());
        loaded.emplace_back(name, t);
    }
    if (r.pos != buf.size())
        throw LengthError(path + ": trailing bytes after the tensor section");

    auto take = [&loaded, &path](const std::string& name) {
        for (auto& [n, t] : loaded)
            if (n == name && t) {
                auto out_t = t;
                t = nullptr;
                return out_t;
            }
        throw CheckpointError(path + ": missing tensor " + name);
    };

    out.model.conv1_kernel = take("conv1.kernel");
    out.model.conv1_bias = take("conv1.bias");
    out.model.pc_kernel = take("pc_conv.kernel");
    out.model.pc_bias = take("pc_conv.bias");
    out.model.transform_bank = take("transform_bank");
    const size_t decoder_layers = out.model.config.decoder_hidden.size() + 1;
    for (size_t i = 0; i < decoder_layers; ++i) {
        out.model.decoder_weights.push_back(take("decoder." + std::to_string(i) + ".weight"));
        out.model.decoder_biases.push_back(take("decoder." + std::to_string(i) + ".bias"));
    }
    for (const auto& [n, t] : loaded)
        if (t) throw CheckpointError(path + ": unexpected tensor " + n);

    out.model.validate();
    return out;
}

void emit_curve(const std::vector<PruneEvent>& records, const std::string& path) {
    auto sorted = records;
    std::sort(sorted.begin(), sorted.end(),
              [](const PruneEvent& a, const PruneEvent& b) {
                  return a.n_remaining > b.n_remaining;
              });

    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "n_remaining,best_accuracy,flops_pc,flops_routing,wall_time_s\n";
    char line[256];
    for (const auto& e : sorted) {
        std::snprintf(line, sizeof(line), "%d,%.9g,%lld,%lld,%.17g\n", e.n_remaining,
                      static_cast<double>(e.best_accuracy), e.flops_pc, e.flops_routing,
                      e.wall_time_s);
        f << line;
    }
    if (!f) throw IoError("failed writing " + path);
}

std::vector<PruneEvent> read_curve(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);

    std::string line;
    if (!std::getline(f, line) ||
        line != "n_remaining,best_accuracy,flops_pc,flops_routing,wall_time_s")
        throw ParseError(path + ": bad curve header");

    std::vector<PruneEvent> records;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        PruneEvent e;
        double acc = 0.0;
        if (std::sscanf(line.c_str(), "%d,%lf,%lld,%lld,%lf", &e.n_remaining, &acc,
                        &e.flops_pc, &e.flops_routing, &e.wall_time_s) != 5)
            throw ParseError(path + ": bad curve row '" + line + "'");
        e.best_accuracy = static_cast<float>(acc);
        records.push_back(e);
    }
    return records;
}

}  // namespace capsprune
