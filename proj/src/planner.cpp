#include "tinyvlm/planner.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "tinyvlm/error.hpp"

namespace tinyvlm {

namespace {

constexpr std::uint64_t KiB = 1024;
constexpr std::uint64_t MiB = 1024 * 1024;

constexpr std::array<std::pair<const char*, RegionRole>, 5> kRegionKeys{{
    {"flash", RegionRole::Flash},
    {"accel_weight", RegionRole::AccelWeight},
    {"sram", RegionRole::Sram},
    {"tcm", RegionRole::Tcm},
    {"accel_data", RegionRole::AccelData},
}};

constexpr std::array<RegionRole, 2> kWeightPreference{RegionRole::AccelWeight, RegionRole::Flash};
constexpr std::array<RegionRole, 3> kDataPreference{RegionRole::AccelData, RegionRole::Tcm, RegionRole::Sram};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t parse_size(const std::string& v, std::size_t line) {
    std::uint64_t n = 0;
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, n);
    if (ec != std::errc{} || p == v.data())
        throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": bad size '" + v + "'");
    const std::string suffix(p, end);
    std::uint64_t mult = 1;
    if (suffix == "K" || suffix == "KB")
        mult = KiB;
    else if (suffix == "M" || suffix == "MB")
        mult = MiB;
    else if (!suffix.empty())
        throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": unknown size suffix '" + suffix + "'");
    if (n > UINT64_MAX / mult) throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": size overflows");
    return n * mult;
}

std::string format_size(std::uint64_t n) {
    if (n != 0 && n % MiB == 0) return std::to_string(n / MiB) + "M";
    if (n != 0 && n % KiB == 0) return std::to_string(n / KiB) + "K";
    return std::to_string(n);
}

struct Item {
    const char* name;
    std::uint64_t bytes;
};

std::vector<RegionRole> available(const PlatformSpec& spec, std::span<const RegionRole> preference) {
    std::vector<RegionRole> out;
    for (const auto r : preference)
        if (spec.capacity(r)) out.push_back(r);
    return out;
}

// First assignment (earlier items' preferences most significant) that fits.
std::optional<std::vector<std::size_t>> first_fit_assignment(const std::vector<Item>& items,
                                                             const std::vector<RegionRole>& regions,
                                                             const PlatformSpec& spec) {
    if (regions.empty()) return std::nullopt;
    std::vector<std::size_t> choice(items.size(), 0);
    std::vector<std::uint64_t> used(regions.size(), 0);
    // Depth-first search; the tree is at most 3^2 leaves.
    auto search = [&](auto&& self, std::size_t i) -> bool {
        if (i == items.size()) return true;
        for (std::size_t r = 0; r < regions.size(); ++r) {
            const auto cap = *spec.capacity(regions[r]);
            if (items[i].bytes > cap - used[r]) continue;
            used[r] += items[i].bytes;
            choice[i] = r;
            if (self(self, i + 1)) return true;
            used[r] -= items[i].bytes;
        }
        return false;
    };
    if (!search(search, 0)) return std::nullopt;
    return choice;
}

void place_group(const std::vector<Item>& items, std::span<const RegionRole> preference, const PlatformSpec& spec,
                 LayoutReport& report) {
    const auto regions = available(spec, preference);
    if (const auto fit = first_fit_assignment(items, regions, spec)) {
        for (std::size_t i = 0; i < items.size(); ++i)
            report.placements.push_back({items[i].name, regions[(*fit)[i]], items[i].bytes});
        return;
    }
    report.feasible = false;
    std::vector<std::uint64_t> used(regions.size(), 0);
    for (const auto& item : items) {
        bool placed = false;
        for (std::size_t r = 0; r < regions.size() && !placed; ++r) {
            if (item.bytes <= *spec.capacity(regions[r]) - used[r]) {
                used[r] += item.bytes;
                report.placements.push_back({item.name, regions[r], item.bytes});
                placed = true;
            }
        }
        if (!placed && report.violating_item.empty()) report.violating_item = item.name;
    }
}

std::string bar(std::uint64_t used, std::uint64_t cap, std::size_t width) {
    const auto filled = cap == 0 ? width : static_cast<std::size_t>((used * width + cap - 1) / cap);
    return std::string(std::min(filled, width), '#') + std::string(width - std::min(filled, width), '.');
}

std::string kb(std::uint64_t n) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << static_cast<double>(n) / 1024.0 << " KB";
    return os.str();
}

}  // namespace

const char* to_string(RegionRole r) noexcept {
    for (const auto& [key, role] : kRegionKeys)
        if (role == r) return key;
    return "?";
}

bool is_weight_region(RegionRole r) noexcept { return r == RegionRole::Flash || r == RegionRole::AccelWeight; }

std::optional<std::uint64_t> PlatformSpec::capacity(RegionRole r) const {
    for (const auto& reg : regions)
        if (reg.role == r) return reg.capacity;
    return std::nullopt;
}

void PlatformSpec::validate() const {
    if (name.empty()) throw Error(ErrorCode::InvalidArgument, "platform has no name");
    if (!capacity(RegionRole::Flash) || !capacity(RegionRole::Sram))
        throw Error(ErrorCode::InvalidArgument, "platform " + name + " must declare flash and sram");
    for (std::size_t i = 0; i < regions.size(); ++i) {
        if (regions[i].capacity == 0)
            throw Error(ErrorCode::InvalidArgument, std::string("region ") + to_string(regions[i].role) + " is empty");
        for (std::size_t j = 0; j < i; ++j)
            if (regions[j].role == regions[i].role)
                throw Error(ErrorCode::InvalidArgument,
                            std::string("region ") + to_string(regions[i].role) + " declared twice");
    }
    if (clock_mhz < 0.0) throw Error(ErrorCode::InvalidArgument, "negative clock");
}

PlatformSpec PlatformSpec::parse(const std::string& text) {
    PlatformSpec spec;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw.substr(0, raw.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "name") {
            spec.name = value;
            continue;
        }
        if (key == "clock_mhz") {
            try {
                std::size_t used = 0;
                spec.clock_mhz = std::stod(value, &used);
                if (used != value.size()) throw std::invalid_argument(value);
            } catch (const std::exception&) {
                throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": bad clock '" + value + "'");
            }
            continue;
        }
        const auto it = std::find_if(kRegionKeys.begin(), kRegionKeys.end(),
                                     [&](const auto& kv) { return key == kv.first; });
        if (it == kRegionKeys.end())
            throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        spec.regions.push_back({it->second, parse_size(value, line_no)});
    }
    spec.validate();
    return spec;
}

PlatformSpec PlatformSpec::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::IoError, "cannot open platform file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

std::string PlatformSpec::to_text() const {
    std::ostringstream os;
    os << "name=" << name << "\n";
    os << "clock_mhz=" << clock_mhz << "\n";
    for (const auto& r : regions) os << to_string(r.role) << "=" << format_size(r.capacity) << "\n";
    return os.str();
}

PlatformSpec PlatformSpec::preset(const std::string& name) {
    if (name == "stm32h7") return {"stm32h7", 480, {{RegionRole::Flash, 2 * MiB}, {RegionRole::Sram, 1 * MiB}}};
    if (name == "stm32h7_512k")
        return {"stm32h7_512k", 480, {{RegionRole::Flash, 2 * MiB}, {RegionRole::Sram, 512 * KiB}}};
    if (name == "max78000")
        return {"max78000",
                100,
                {{RegionRole::Flash, 512 * KiB},
                 {RegionRole::AccelWeight, 442 * KiB},
                 {RegionRole::Sram, 512 * KiB},
                 {RegionRole::AccelData, 512 * KiB}}};
    if (name == "gap9") return {"gap9", 400, {{RegionRole::Flash, 2 * MiB}, {RegionRole::Sram, 1536 * KiB}}};
    if (name == "esp32s3") return {"esp32s3", 240, {{RegionRole::Flash, 8 * MiB}, {RegionRole::Sram, 512 * KiB}}};
    throw Error(ErrorCode::InvalidArgument, "unknown platform preset '" + name + "'");
}

std::vector<std::string> PlatformSpec::preset_names() {
    return {"stm32h7", "stm32h7_512k", "max78000", "gap9", "esp32s3"};
}

std::size_t activation_element_bytes(const LayerGraph& g) noexcept { return g.calibrated ? 1 : 4; }

std::uint64_t peak_activation(const LayerGraph& g, std::size_t element_bytes) {
    if (g.input_shape.numel() == 0) throw Error(ErrorCode::UnresolvedShapes, "graph input shape is empty");
    const std::uint64_t eb = element_bytes;
    std::uint64_t peak = 0;
    Shape3 in = g.input_shape;
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        std::vector<Shape3> points;
        try {
            points = activation_point_shapes(g, i);
        } catch (const Error& e) {
            throw Error(ErrorCode::UnresolvedShapes, e.what());
        }
        const std::uint64_t skip = g.layers[i].has_residual() ? in.numel() * eb : 0;
        std::uint64_t prev = in.numel() * eb;
        for (std::size_t j = 0; j < points.size(); ++j) {
            const std::uint64_t out = points[j].numel() * eb;
            peak = std::max(peak, prev + out + (j > 0 ? skip : 0));
            prev = out;
        }
        in = points.back();
    }
    return peak;
}

std::uint64_t peak_activation(const LayerGraph& g) { return peak_activation(g, activation_element_bytes(g)); }

PlanInputs plan_inputs(const LayerGraph& g, const EmbeddingTable* table) {
    PlanInputs in;
    in.weight_bytes = model_size_bytes(g, g.calibrated ? Precision::I8 : Precision::F32);
    in.table_bytes = table ? table->payload_bytes() : 0;
    in.activation_bytes = peak_activation(g);
    in.io_bytes = g.input_shape.numel();
    return in;
}

std::uint64_t LayoutReport::used(RegionRole r) const noexcept {
    for (const auto& u : regions)
        if (u.region == r) return u.used;
    return 0;
}

std::optional<std::uint64_t> LayoutReport::slack(RegionRole r) const {
    for (const auto& u : regions)
        if (u.region == r) return u.slack();
    return std::nullopt;
}

LayoutReport plan(const PlanInputs& in, const PlatformSpec& spec) {
    spec.validate();
    LayoutReport report;
    report.platform = spec.name;
    report.peak_activation_bytes = in.activation_bytes;
    report.feasible = true;
    place_group({{"weights", in.weight_bytes}, {"embeddings", in.table_bytes}}, kWeightPreference, spec, report);
    place_group({{"activations", in.activation_bytes}, {"io", in.io_bytes}}, kDataPreference, spec, report);
    for (const auto& r : spec.regions) {
        RegionUsage u{r.role, r.capacity, 0};
        for (const auto& p : report.placements)
            if (p.region == r.role) u.used += p.bytes;
        report.regions.push_back(u);
    }
    return report;
}

LayoutReport plan(const LayerGraph& g, const EmbeddingTable* table, const PlatformSpec& spec) {
    return plan(plan_inputs(g, table), spec);
}

std::uint64_t classes_for_slack(std::uint64_t slack_bytes, std::size_t d, std::size_t bytes_per_value) {
    if (d == 0 || bytes_per_value == 0) throw Error(ErrorCode::InvalidArgument, "d and bytes_per_value must be positive");
    return slack_bytes / (static_cast<std::uint64_t>(d) * bytes_per_value);
}

std::uint64_t max_classes(const PlatformSpec& spec, const PlanInputs& base, std::size_t d,
                          std::size_t bytes_per_value) {
    PlanInputs probe = base;
    probe.table_bytes = 0;
    const auto empty = plan(probe, spec);
    if (!empty.feasible)
        throw Error(ErrorCode::InfeasibleBase, "model does not fit " + spec.name + " without a table (" +
                                                   empty.violating_item + " has no room)");
    classes_for_slack(0, d, bytes_per_value);  // argument check
    const std::uint64_t per_class = static_cast<std::uint64_t>(d) * bytes_per_value;
    std::uint64_t weight_total = 0;
    for (const auto& r : spec.regions)
        if (is_weight_region(r.role)) weight_total += r.capacity;
    // Feasibility is monotone in the table size, so bisect on K.
    std::uint64_t lo = 0, hi = weight_total / per_class + 1;
    while (hi - lo > 1) {
        const std::uint64_t mid = lo + (hi - lo) / 2;
        probe.table_bytes = mid * per_class;
        (plan(probe, spec).feasible ? lo : hi) = mid;
    }
    return lo;
}

std::uint64_t max_classes(const PlatformSpec& spec, const LayerGraph& g, std::size_t d, std::size_t bytes_per_value) {
    return max_classes(spec, plan_inputs(g, nullptr), d, bytes_per_value);
}

std::string render_layout(const LayoutReport& report) {
    constexpr std::size_t width = 40;
    std::ostringstream os;
    os << report.platform << (report.feasible ? "  [feasible]" : "  [INFEASIBLE: " + report.violating_item + "]")
       << "\n";
    auto block = [&](bool weights) {
        for (const auto& r : report.regions) {
            if (is_weight_region(r.region) != weights) continue;
            os << "\n" << to_string(r.region) << " (" << kb(r.capacity) << ")\n";
            os << "+" << std::string(width, '-') << "+\n";
            for (const auto& p : report.placements) {
                if (p.region != r.region) continue;
                std::string line = " " + p.item;
                const std::string size = kb(p.bytes) + " ";
                line += std::string(width - std::min(width, line.size() + size.size()), ' ') + size;
                os << "|" << line << "|\n";
            }
            std::string free_line = " free";
            const std::string size = kb(r.slack()) + " ";
            free_line += std::string(width - std::min(width, free_line.size() + size.size()), ' ') + size;
            os << "|" << free_line << "|\n";
            os << "+" << std::string(width, '-') << "+\n";
            os << " [" << bar(r.used, r.capacity, width - 2) << "]\n";
        }
    };
    block(true);
    block(false);
    return os.str();
}

}  // namespace tinyvlm
