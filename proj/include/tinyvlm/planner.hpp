#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tinyvlm/embedstore.hpp"
#include "tinyvlm/encoder.hpp"

namespace tinyvlm {

// Weight regions hold read-only items (model weights, class table); data regions
// hold the activation arena and I/O buffers.
enum class RegionRole : std::uint8_t { Flash, AccelWeight, Sram, Tcm, AccelData };

const char* to_string(RegionRole r) noexcept;
bool is_weight_region(RegionRole r) noexcept;

struct MemoryRegion {
    RegionRole role = RegionRole::Flash;
    std::uint64_t capacity = 0;
    friend bool operator==(const MemoryRegion&, const MemoryRegion&) = default;
};

// Plain-text form, one key=value per line, '#' comments:
//   name=stm32h7
//   clock_mhz=480
//   flash=2M
//   sram=1M
//   accel_weight=442K   (optional)
//   accel_data=512K     (optional)
//   tcm=128K            (optional)
// Sizes are bytes with an optional K (x1024) or M (x1048576) suffix.
struct PlatformSpec {
    std::string name;
    double clock_mhz = 0.0;
    std::vector<MemoryRegion> regions;  // at most one per role, in declaration order

    std::optional<std::uint64_t> capacity(RegionRole r) const;
    // Throws InvalidArgument.
    void validate() const;

    static PlatformSpec parse(const std::string& text);
    static PlatformSpec from_file(const std::string& path);
    std::string to_text() const;

    // stm32h7, stm32h7_512k, max78000, gap9, esp32s3.
    static PlatformSpec preset(const std::string& name);
    static std::vector<std::string> preset_names();
    friend bool operator==(const PlatformSpec&, const PlatformSpec&) = default;
};

// Bytes per activation element: 1 for a calibrated graph, 4 otherwise.
std::size_t activation_element_bytes(const LayerGraph& g) noexcept;

// Largest simultaneously live activation footprint of a sequential forward pass.
// Each step holds its input and output; inverted residual blocks also hold the
// block input while the skip connection is pending, and the add happens in place.
std::uint64_t peak_activation(const LayerGraph& g, std::size_t element_bytes);
std::uint64_t peak_activation(const LayerGraph& g);

struct PlanInputs {
    std::uint64_t weight_bytes = 0;
    std::uint64_t table_bytes = 0;
    std::uint64_t activation_bytes = 0;
    std::uint64_t io_bytes = 0;
};

// Inputs for a graph and table: INT8 model size when calibrated (f32 otherwise),
// table payload bytes, peak activations, and the raw u8 input frame as I/O.
PlanInputs plan_inputs(const LayerGraph& g, const EmbeddingTable* table);

struct Placement {
    std::string item;
    RegionRole region = RegionRole::Flash;
    std::uint64_t bytes = 0;
    friend bool operator==(const Placement&, const Placement&) = default;
};

struct RegionUsage {
    RegionRole region = RegionRole::Flash;
    std::uint64_t capacity = 0;
    std::uint64_t used = 0;
    std::uint64_t slack() const noexcept { return capacity - used; }
};

struct LayoutReport {
    std::string platform;
    std::vector<Placement> placements;
    std::vector<RegionUsage> regions;
    std::uint64_t peak_activation_bytes = 0;
    bool feasible = false;
    std::string violating_item;  // first item with no region, empty when feasible

    std::uint64_t used(RegionRole r) const noexcept;
    std::optional<std::uint64_t> slack(RegionRole r) const;
};

// Items are placed in the order weights, embeddings, activations, io. Each item
// prefers the most specialised region of its kind (accelerator weight memory
// before flash; accelerator data memory, then TCM, then SRAM). The chosen layout
// is the first feasible assignment in that preference order; when none exists
// the report shows the greedy placement and names the first item that failed.
LayoutReport plan(const PlanInputs& in, const PlatformSpec& spec);
LayoutReport plan(const LayerGraph& g, const EmbeddingTable* table, const PlatformSpec& spec);

// floor(slack / (d * b)) for a known flash slack.
std::uint64_t classes_for_slack(std::uint64_t slack_bytes, std::size_t d, std::size_t bytes_per_value);
// Largest class count whose table still fits beside the model. Throws
// InfeasibleBase when the model alone does not fit.
std::uint64_t max_classes(const PlatformSpec& spec, const PlanInputs& base, std::size_t d,
                          std::size_t bytes_per_value);
std::uint64_t max_classes(const PlatformSpec& spec, const LayerGraph& g, std::size_t d, std::size_t bytes_per_value);

// Two-column ASCII diagram of weight and data regions.
std::string render_layout(const LayoutReport& report);

}  // namespace tinyvlm
