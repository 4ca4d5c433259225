#include "mddet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace mddet {

namespace {

constexpr char kMagic[6] = {'M', 'D', 'D', 'E', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!f) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

std::string read_spec(std::ifstream& f) {
    char magic[6];
    f.read(magic, 6);
    if (!f || std::memcmp(magic, kMagic, 6) != 0)
        throw std::runtime_error("checkpoint: bad magic (not an MDDET1 file)");
    const auto version = read_pod<std::uint32_t>(f);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const auto spec_len = read_pod<std::uint64_t>(f);
    std::string spec(spec_len, '\0');
    f.read(spec.data(), static_cast<std::streamsize>(spec_len));
    if (!f) throw std::runtime_error("checkpoint: truncated spec");
    return spec;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Network& net) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path.string());
    f.write(kMagic, 6);
    write_pod(f, kVersion);
    const std::string spec = net.spec().serialize();
    write_pod(f, static_cast<std::uint64_t>(spec.size()));
    f.write(spec.data(), static_cast<std::streamsize>(spec.size()));

    auto blocks = net.state_views();
    write_pod(f, static_cast<std::uint32_t>(blocks.size()));
    std::vector<float> buf;
    for (const auto& b : blocks) {
        write_pod(f, static_cast<std::uint64_t>(b.size()));
        buf.resize(b.size());
        for (std::size_t i = 0; i < b.size(); ++i) buf[i] = static_cast<float>(b[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
    const std::string spec_text = read_spec(f);
    Network net = Network::build(NetworkSpec::parse(spec_text), 0);

    auto blocks = net.state_views();
    const auto n_blocks = read_pod<std::uint32_t>(f);
    if (n_blocks != blocks.size())
        throw std::runtime_error("checkpoint: block count " + std::to_string(n_blocks) +
                                 " does not match spec (" + std::to_string(blocks.size()) + ")");
    std::vector<float> buf;
    for (auto& b : blocks) {
        const auto count = read_pod<std::uint64_t>(f);
        if (count != b.size())
            throw std::runtime_error("checkpoint: block size mismatch");
        buf.resize(count);
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(count * sizeof(float)));
        if (!f) throw std::runtime_error("checkpoint: truncated parameter block");
        for (std::size_t i = 0; i < count; ++i) b[i] = static_cast<double>(buf[i]);
    }
    return net;
}

std::string checkpoint_spec_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
    return read_spec(f);
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace mddet
