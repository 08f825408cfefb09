#include "stackunet/model.hpp"

#include <algorithm>

#include "stackunet/errors.hpp"

namespace stackunet {

BlockKind block_kind_from_string(const std::string& s) {
    if (s == "unet") return BlockKind::unet;
    if (s == "res_unet") return BlockKind::res_unet;
    throw ConfigError("unknown block kind '" + s + "' (expected unet or res_unet)");
}

const char* to_string(BlockKind k) { return k == BlockKind::unet ? "unet" : "res_unet"; }

UpMode up_mode_from_string(const std::string& s) {
    if (s == "transposed_conv") return UpMode::transposed_conv;
    if (s == "nearest_conv") return UpMode::nearest_conv;
    throw ConfigError("unknown upsample mode '" + s + "' (expected transposed_conv or nearest_conv)");
}

const char* to_string(UpMode m) {
    return m == UpMode::transposed_conv ? "transposed_conv" : "nearest_conv";
}

void BlockSpec::validate() const {
    if (depth < 1) throw ConfigError("block.depth must be >= 1, got " + std::to_string(depth));
    if (base_channels < 1) {
        throw ConfigError("block.base_channels must be >= 1, got " +
                          std::to_string(base_channels));
    }
    if (out_channels < 1) {
        throw ConfigError("block.out_channels must be >= 1, got " + std::to_string(out_channels));
    }
}

void CascadeSpec::validate() const {
    if (n_blocks < 1) throw ConfigError("n_blocks must be >= 1, got " + std::to_string(n_blocks));
    if (input_channels < 1) {
        throw ConfigError("input_channels must be >= 1, got " + std::to_string(input_channels));
    }
    block.validate();
}

namespace {

std::string bname(int block, const std::string& rest) {
    return "b" + std::to_string(block) + "/" + rest;
}

// Two 3x3 convs with optional batch norm; res_unet wraps the pair in a residual
// addition, projecting the shortcut with a 1x1 conv when channel counts differ.
int append_conv_group(Graph& g, const BlockSpec& spec, int src, int in_c, int out_c, int block,
                      const std::string& prefix) {
    int x = g.add_conv(src, out_c, 3, prefix + "/conv1", block);
    if (spec.batch_norm) x = g.add_batchnorm(x, prefix + "/bn1", block);
    x = g.add_relu(x, prefix + "/relu1", block);
    x = g.add_conv(x, out_c, 3, prefix + "/conv2", block);
    if (spec.batch_norm) x = g.add_batchnorm(x, prefix + "/bn2", block);
    if (spec.kind == BlockKind::res_unet) {
        int shortcut = src;
        if (in_c != out_c) shortcut = g.add_conv(src, out_c, 1, prefix + "/proj", block);
        x = g.add_add(x, shortcut, prefix + "/residual", block);
    }
    return g.add_relu(x, prefix + "/relu2", block);
}

// Appends one encoder-decoder block; returns the node holding the block's output
// (after the 1x1 head conv, no activation).
int append_block(Graph& g, const BlockSpec& spec, int in_node, int in_c, int block) {
    std::vector<int> skips;       // encoder outputs, top to bottom
    std::vector<int> skip_chans;
    int x = in_node;
    int ch = in_c;
    for (int d = 0; d < spec.depth; ++d) {
        const int out_c = spec.base_channels << d;
        x = append_conv_group(g, spec, x, ch, out_c, block,
                              bname(block, "enc" + std::to_string(d)));
        skips.push_back(x);
        skip_chans.push_back(out_c);
        x = g.add_maxpool(x, bname(block, "pool" + std::to_string(d)), block);
        ch = out_c;
    }
    const int bottleneck_c = spec.base_channels << spec.depth;
    x = append_conv_group(g, spec, x, ch, bottleneck_c, block, bname(block, "bottleneck"));
    ch = bottleneck_c;
    for (int d = spec.depth - 1; d >= 0; --d) {
        const int out_c = skip_chans[d];
        int up;
        if (spec.upsample == UpMode::transposed_conv) {
            up = g.add_tconv(x, out_c, bname(block, "up" + std::to_string(d)), block);
        } else {
            up = g.add_upsample_nearest(x, bname(block, "up" + std::to_string(d) + "/nn"), block);
            up = g.add_conv(up, out_c, 3, bname(block, "up" + std::to_string(d) + "/conv"), block);
        }
        x = g.add_concat({up, skips[d]}, bname(block, "cat" + std::to_string(d)), block);
        x = append_conv_group(g, spec, x, 2 * out_c, out_c, block,
                              bname(block, "dec" + std::to_string(d)));
        ch = out_c;
    }
    return g.add_conv(x, spec.out_channels, 1, bname(block, "head"), block);
}

void build_cascade_graph(Graph& g, const CascadeSpec& spec) {
    const int input = g.add_input(spec.input_channels);
    int prev = -1;
    int last_head = -1;
    for (int b = 1; b <= spec.n_blocks; ++b) {
        int in_node, in_c;
        if (b == 1) {
            in_node = input;
            in_c = spec.input_channels;
        } else if (spec.long_skip) {
            in_node = g.add_concat({prev, input}, "cascade/skip" + std::to_string(b), -1);
            in_c = spec.block.out_channels + spec.input_channels;
        } else {
            in_node = prev;
            in_c = spec.block.out_channels;
        }
        BlockSpec bs = spec.block;
        if (b == spec.n_blocks) bs.out_channels = 1;
        last_head = append_block(g, bs, in_node, in_c, b);
        prev = last_head;
    }
    int pre_sigmoid = last_head;
    if (spec.input_residual) {
        const int proj = g.add_conv(input, 1, 1, "cascade/input_proj", -1);
        pre_sigmoid = g.add_add(last_head, proj, "cascade/input_residual", -1);
    }
    const int out = g.add_sigmoid(pre_sigmoid, "cascade/sigmoid", -1);
    g.set_output(out);
}

}  // namespace

Model build_single_block(const BlockSpec& spec, int in_channels, uint64_t seed) {
    spec.validate();
    if (in_channels < 1) {
        throw ConfigError("in_channels must be >= 1, got " + std::to_string(in_channels));
    }
    Model m;
    m.spec.n_blocks = 1;
    m.spec.block = spec;
    m.spec.input_channels = in_channels;
    m.spec.long_skip = false;
    m.bare_block = true;
    m.seed = seed;
    const int input = m.graph.add_input(in_channels);
    const int out = append_block(m.graph, spec, input, in_channels, 1);
    m.graph.set_output(out);
    Rng rng = Rng::derive(seed, {rng_stream::kInit});
    m.graph.init_params(rng);
    return m;
}

Model build_cascade(const CascadeSpec& spec, uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    m.seed = seed;
    build_cascade_graph(m.graph, spec);
    Rng rng = Rng::derive(seed, {rng_stream::kInit});
    m.graph.init_params(rng);
    return m;
}

Tensor Model::forward(const Tensor& batch, bool training) {
    if (batch.c != spec.input_channels) {
        throw ConfigError("forward: batch has " + std::to_string(batch.c) +
                          " channels, model expects " + std::to_string(spec.input_channels));
    }
    const int div = 1 << spec.block.depth;
    if (batch.h % div != 0 || batch.w % div != 0) {
        throw ConfigError("forward: spatial size " + std::to_string(batch.h) + "x" +
                          std::to_string(batch.w) + " not divisible by " + std::to_string(div));
    }
    return graph.forward(batch, training);
}

ParamCounts Model::count_parameters() const {
    ParamCounts pc;
    const auto by_block = graph.param_count_by_block();
    pc.per_block.assign(spec.n_blocks, 0);
    for (const auto& [block, count] : by_block) {
        pc.total += count;
        if (block >= 1 && block <= spec.n_blocks) pc.per_block[block - 1] += count;
        // block -1 entries (input_residual projection) count toward the total only
    }
    return pc;
}

int Model::block_input_channels(int block_index) const {
    for (const Node& n : graph.nodes()) {
        if (n.block == block_index && n.kind == LayerKind::Conv) return n.in_channels;
    }
    throw ConfigError("no block " + std::to_string(block_index) + " in this model");
}

}  // namespace stackunet
