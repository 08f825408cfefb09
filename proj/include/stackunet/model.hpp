#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stackunet/graph.hpp"
#include "stackunet/tensor.hpp"

namespace stackunet {

enum class BlockKind { unet, res_unet };
enum class UpMode { transposed_conv, nearest_conv };

BlockKind block_kind_from_string(const std::string& s);
const char* to_string(BlockKind k);
UpMode up_mode_from_string(const std::string& s);
const char* to_string(UpMode m);

/// One encoder-decoder block: `depth` down/up stages, channel width doubling per
/// stage from `base_channels`, encoder-to-decoder skip concatenation at every
/// resolution, and a 1x1 head mapping to `out_channels`.
struct BlockSpec {
    BlockKind kind = BlockKind::unet;
    int depth = 4;
    int base_channels = 32;
    int out_channels = 32;   // 32 for intermediate blocks, 1 for the last
    bool batch_norm = true;
    UpMode upsample = UpMode::transposed_conv;

    void validate() const;
};

/// The full cascade: n_blocks chained blocks. Every block except the last emits
/// `block.out_channels` feature maps; with long_skip each later block also sees the
/// raw input image concatenated onto those maps. A sigmoid follows the last block.
struct CascadeSpec {
    int n_blocks = 1;
    BlockSpec block;
    bool long_skip = true;
    int input_channels = 3;
    /// Additive identity reading: adds a 1x1 projection of the input image to the
    /// final pre-sigmoid logits. Off by default (concatenation access only).
    bool input_residual = false;

    void validate() const;
};

struct ParamCounts {
    std::vector<int64_t> per_block;  // index 0 = block 1
    int64_t total = 0;
};

/// An instantiated, trainable network plus the spec it was built from.
struct Model {
    CascadeSpec spec;
    uint64_t seed = 0;
    Graph graph;
    bool bare_block = false;  // built by build_single_block (no sigmoid head)

    /// Runs the cascade. Checks channel count and that H and W divide 2^depth.
    Tensor forward(const Tensor& batch, bool training = false);

    ParamCounts count_parameters() const;

    /// Input channel count of block i (1-based), read off the built graph.
    int block_input_channels(int block_index) const;
};

/// Builds a single block as a standalone runnable network (no sigmoid head).
Model build_single_block(const BlockSpec& spec, int in_channels, uint64_t seed);

Model build_cascade(const CascadeSpec& spec, uint64_t seed);

// Checkpoint container: magic, format-version integer, JSON header (spec, seed,
// array directory), raw float32 payload. Save/load round-trips bitwise.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace stackunet
