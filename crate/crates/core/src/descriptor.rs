//! Text descriptor for network architectures.
//!
//! One layer per line; `#` starts a comment. Unless `from=` is given, a layer
//! reads the previous line's output. Channel and feature counts are inferred,
//! so descriptors stay free of redundant arithmetic.
//!
//! ```text
//! input <channels> <height> <width>
//! init kaiming|zero                            # optional, default kaiming
//! conv <name> filters=N kernel=K [stride=1] [pad=0] [bias=true] [from=L]
//! bn <name> [from=L]
//! relu <name> [from=L]
//! maxpool <name> kernel=K [stride=K] [from=L]
//! avgpool <name> kernel=K|global [stride=K] [from=L]
//! flatten <name> [from=L]
//! linear <name> out=F [bias=true] [from=L]
//! add <name> from=A,B
//! resblock <name> filters=N [stride=1] [from=L]
//! ```
//!
//! `resblock` expands to the usual two-conv residual unit: 3x3 conv (given
//! stride) + bn + relu + 3x3 conv + bn, joined with the block input and a
//! trailing relu. When the stride or channel count changes, the shortcut
//! becomes a 1x1 projection conv + bn. Expanded layers are named
//! `<name>/conv1`, `<name>/bn1`, `<name>/relu1`, `<name>/conv2`, `<name>/bn2`,
//! `<name>/proj`, `<name>/projbn`, `<name>/add`, `<name>/relu2`.

use crate::error::{CoreError, Result};
use crate::graph::{Init, LayerKind, LayerSpec, ModelGraph, Src, ValueShape};
use std::collections::HashMap;

struct Parser {
    input_shape: Option<(usize, usize, usize)>,
    init: Init,
    layers: Vec<LayerSpec>,
    shapes: Vec<ValueShape>,
    by_name: HashMap<String, usize>,
    line: usize,
}

impl Parser {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(CoreError::Parse {
            line: self.line,
            msg: msg.into(),
        })
    }

    fn resolve(&self, name: &str) -> Result<Src> {
        match self.by_name.get(name) {
            Some(&id) => Ok(Src::Layer(id)),
            None => self.err(format!("unknown layer '{name}'")),
        }
    }

    /// `from=` value, or the previous layer (the network input for the first).
    fn source(&self, attrs: &Attrs) -> Result<Src> {
        match attrs.get("from") {
            Some(name) => self.resolve(name),
            None => match self.layers.len() {
                0 => Ok(Src::Input),
                n => Ok(Src::Layer(n - 1)),
            },
        }
    }

    fn shape_of(&self, src: Src) -> Result<ValueShape> {
        match src {
            Src::Input => {
                let (c, h, w) = self
                    .input_shape
                    .ok_or(CoreError::Parse {
                        line: self.line,
                        msg: "layer appears before the input line".into(),
                    })?;
                Ok(ValueShape::Chw(c, h, w))
            }
            Src::Layer(id) => Ok(self.shapes[id]),
        }
    }

    fn chw_of(&self, src: Src) -> Result<(usize, usize, usize)> {
        match self.shape_of(src)? {
            ValueShape::Chw(c, h, w) => Ok((c, h, w)),
            ValueShape::Flat(_) => self.err("expected a CHW producer"),
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<Src>) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return self.err(format!("duplicate layer name '{name}'"));
        }
        let out_shape = self.out_shape(&kind, &inputs)?;
        let id = self.layers.len();
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            inputs,
        });
        self.shapes.push(out_shape);
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    fn out_shape(&self, kind: &LayerKind, inputs: &[Src]) -> Result<ValueShape> {
        use crate::graph::out_extent;
        Ok(match kind {
            LayerKind::Conv2d {
                out_filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (_, h, w) = self.chw_of(inputs[0])?;
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return self.err(format!("kernel {kernel} larger than padded input {h}x{w}"));
                }
                ValueShape::Chw(
                    *out_filters,
                    out_extent(h, *kernel, *stride, *padding),
                    out_extent(w, *kernel, *stride, *padding),
                )
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::Add => {
                self.shape_of(inputs[0])?
            }
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let (c, h, w) = self.chw_of(inputs[0])?;
                if h < *kernel || w < *kernel {
                    return self.err(format!("pool kernel {kernel} larger than input {h}x{w}"));
                }
                ValueShape::Chw(c, out_extent(h, *kernel, *stride, 0), out_extent(w, *kernel, *stride, 0))
            }
            LayerKind::Linear { out_features, .. } => ValueShape::Flat(*out_features),
            LayerKind::Flatten => {
                let (c, h, w) = self.chw_of(inputs[0])?;
                ValueShape::Flat(c * h * w)
            }
        })
    }
}

type Attrs = HashMap<String, String>;

fn parse_attrs(tokens: &[&str], line: usize) -> Result<Attrs> {
    let mut attrs = HashMap::new();
    for tok in tokens {
        let Some((k, v)) = tok.split_once('=') else {
            return Err(CoreError::Parse {
                line,
                msg: format!("expected key=value, got '{tok}'"),
            });
        };
        if attrs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CoreError::Parse {
                line,
                msg: format!("duplicate attribute '{k}'"),
            });
        }
    }
    Ok(attrs)
}

fn take_usize(attrs: &Attrs, key: &str, line: usize) -> Result<Option<usize>> {
    match attrs.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<usize>().map(Some).map_err(|_| CoreError::Parse {
            line,
            msg: format!("attribute {key}={v} is not a positive integer"),
        }),
    }
}

fn take_bool(attrs: &Attrs, key: &str, default: bool, line: usize) -> Result<bool> {
    match attrs.get(key).map(String::as_str) {
        None => Ok(default),
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(v) => Err(CoreError::Parse {
            line,
            msg: format!("attribute {key}={v} must be true or false"),
        }),
    }
}

fn check_known(attrs: &Attrs, allowed: &[&str], line: usize) -> Result<()> {
    for key in attrs.keys() {
        if !allowed.iter().any(|a| a == key) {
            return Err(CoreError::Parse {
                line,
                msg: format!("unknown attribute '{key}'"),
            });
        }
    }
    Ok(())
}

/// Parse a descriptor into a validated graph (parameters zeroed) plus the
/// requested initialization scheme.
pub fn parse_descriptor(text: &str) -> Result<(ModelGraph, Init)> {
    let mut p = Parser {
        input_shape: None,
        init: Init::Kaiming,
        layers: Vec::new(),
        shapes: Vec::new(),
        by_name: HashMap::new(),
        line: 0,
    };

    for (idx, raw) in text.lines().enumerate() {
        p.line = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let directive = tokens[0];

        if directive == "input" {
            if p.input_shape.is_some() {
                return p.err("duplicate input line");
            }
            if tokens.len() != 4 {
                return p.err("input wants: input <channels> <height> <width>");
            }
            let dims: Vec<usize> = tokens[1..]
                .iter()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CoreError::Parse {
                    line: p.line,
                    msg: "input dimensions must be positive integers".into(),
                })?;
            if dims.contains(&0) {
                return p.err("input dimensions must be positive");
            }
            p.input_shape = Some((dims[0], dims[1], dims[2]));
            continue;
        }
        if directive == "init" {
            p.init = match tokens.get(1).copied() {
                Some("kaiming") => Init::Kaiming,
                Some("zero") => Init::Zero,
                other => {
                    return p.err(format!(
                        "init wants kaiming or zero, got '{}'",
                        other.unwrap_or("")
                    ))
                }
            };
            continue;
        }

        let Some(&name) = tokens.get(1) else {
            return p.err(format!("'{directive}' needs a layer name"));
        };
        if name.contains('=') || name.contains('.') {
            return p.err(format!("invalid layer name '{name}'"));
        }
        let attrs = parse_attrs(&tokens[2..], p.line)?;

        match directive {
            "conv" => {
                check_known(&attrs, &["filters", "kernel", "stride", "pad", "bias", "from"], p.line)?;
                let src = p.source(&attrs)?;
                let (c, _, _) = p.chw_of(src)?;
                let filters = take_usize(&attrs, "filters", p.line)?
                    .ok_or_else(|| CoreError::Parse { line: p.line, msg: "conv needs filters=".into() })?;
                let kernel = take_usize(&attrs, "kernel", p.line)?
                    .ok_or_else(|| CoreError::Parse { line: p.line, msg: "conv needs kernel=".into() })?;
                let kind = LayerKind::Conv2d {
                    out_filters: filters,
                    in_channels: c,
                    kernel,
                    stride: take_usize(&attrs, "stride", p.line)?.unwrap_or(1),
                    padding: take_usize(&attrs, "pad", p.line)?.unwrap_or(0),
                    has_bias: take_bool(&attrs, "bias", true, p.line)?,
                };
                p.push(name, kind, vec![src])?;
            }
            "bn" => {
                check_known(&attrs, &["from"], p.line)?;
                let src = p.source(&attrs)?;
                let (c, _, _) = p.chw_of(src)?;
                p.push(name, LayerKind::BatchNorm { channels: c }, vec![src])?;
            }
            "relu" => {
                check_known(&attrs, &["from"], p.line)?;
                let src = p.source(&attrs)?;
                p.push(name, LayerKind::Relu, vec![src])?;
            }
            "maxpool" | "avgpool" => {
                check_known(&attrs, &["kernel", "stride", "from"], p.line)?;
                let src = p.source(&attrs)?;
                let (_, h, w) = p.chw_of(src)?;
                let kernel = match attrs.get("kernel").map(String::as_str) {
                    Some("global") => {
                        if h != w {
                            return p.err(format!("global pooling needs square input, got {h}x{w}"));
                        }
                        h
                    }
                    _ => take_usize(&attrs, "kernel", p.line)?.ok_or_else(|| CoreError::Parse {
                        line: p.line,
                        msg: format!("{directive} needs kernel="),
                    })?,
                };
                let stride = take_usize(&attrs, "stride", p.line)?.unwrap_or(kernel);
                let kind = if directive == "maxpool" {
                    LayerKind::MaxPool { kernel, stride }
                } else {
                    LayerKind::AvgPool { kernel, stride }
                };
                p.push(name, kind, vec![src])?;
            }
            "flatten" => {
                check_known(&attrs, &["from"], p.line)?;
                let src = p.source(&attrs)?;
                p.push(name, LayerKind::Flatten, vec![src])?;
            }
            "linear" => {
                check_known(&attrs, &["out", "bias", "from"], p.line)?;
                let src = p.source(&attrs)?;
                let in_features = match p.shape_of(src)? {
                    ValueShape::Flat(n) => n,
                    ValueShape::Chw(..) => return p.err("linear needs a flattened input"),
                };
                let out = take_usize(&attrs, "out", p.line)?
                    .ok_or_else(|| CoreError::Parse { line: p.line, msg: "linear needs out=".into() })?;
                let kind = LayerKind::Linear {
                    in_features,
                    out_features: out,
                    has_bias: take_bool(&attrs, "bias", true, p.line)?,
                };
                p.push(name, kind, vec![src])?;
            }
            "add" => {
                check_known(&attrs, &["from"], p.line)?;
                let Some(pair) = attrs.get("from") else {
                    return p.err("add needs from=<a>,<b>");
                };
                let parts: Vec<&str> = pair.split(',').collect();
                if parts.len() != 2 {
                    return p.err("add needs exactly two producers: from=<a>,<b>");
                }
                let a = p.resolve(parts[0])?;
                let b = p.resolve(parts[1])?;
                if p.shape_of(a)? != p.shape_of(b)? {
                    return p.err(format!(
                        "add-join inputs disagree: {:?} vs {:?}",
                        p.shape_of(a)?,
                        p.shape_of(b)?
                    ));
                }
                p.push(name, LayerKind::Add, vec![a, b])?;
            }
            "resblock" => {
                check_known(&attrs, &["filters", "stride", "from"], p.line)?;
                let src = p.source(&attrs)?;
                let (c, _, _) = p.chw_of(src)?;
                let filters = take_usize(&attrs, "filters", p.line)?
                    .ok_or_else(|| CoreError::Parse { line: p.line, msg: "resblock needs filters=".into() })?;
                let stride = take_usize(&attrs, "stride", p.line)?.unwrap_or(1);
                expand_resblock(&mut p, name, filters, stride, c, src)?;
            }
            other => {
                return p.err(format!("unknown directive '{other}'"));
            }
        }
    }

    let Some(input_shape) = p.input_shape else {
        return Err(CoreError::Parse {
            line: 0,
            msg: "descriptor has no input line".into(),
        });
    };
    let graph = ModelGraph::new(input_shape, p.layers)?;
    Ok((graph, p.init))
}

fn expand_resblock(
    p: &mut Parser,
    name: &str,
    filters: usize,
    stride: usize,
    in_channels: usize,
    src: Src,
) -> Result<()> {
    let conv1 = p.push(
        &format!("{name}/conv1"),
        LayerKind::Conv2d {
            out_filters: filters,
            in_channels,
            kernel: 3,
            stride,
            padding: 1,
            has_bias: false,
        },
        vec![src],
    )?;
    let bn1 = p.push(
        &format!("{name}/bn1"),
        LayerKind::BatchNorm { channels: filters },
        vec![Src::Layer(conv1)],
    )?;
    let relu1 = p.push(&format!("{name}/relu1"), LayerKind::Relu, vec![Src::Layer(bn1)])?;
    let conv2 = p.push(
        &format!("{name}/conv2"),
        LayerKind::Conv2d {
            out_filters: filters,
            in_channels: filters,
            kernel: 3,
            stride: 1,
            padding: 1,
            has_bias: false,
        },
        vec![Src::Layer(relu1)],
    )?;
    let bn2 = p.push(
        &format!("{name}/bn2"),
        LayerKind::BatchNorm { channels: filters },
        vec![Src::Layer(conv2)],
    )?;
    let shortcut = if stride == 1 && in_channels == filters {
        src
    } else {
        let proj = p.push(
            &format!("{name}/proj"),
            LayerKind::Conv2d {
                out_filters: filters,
                in_channels,
                kernel: 1,
                stride,
                padding: 0,
                has_bias: false,
            },
            vec![src],
        )?;
        let projbn = p.push(
            &format!("{name}/projbn"),
            LayerKind::BatchNorm { channels: filters },
            vec![Src::Layer(proj)],
        )?;
        Src::Layer(projbn)
    };
    let join = p.push(
        &format!("{name}/add"),
        LayerKind::Add,
        vec![Src::Layer(bn2), shortcut],
    )?;
    p.push(&format!("{name}/relu2"), LayerKind::Relu, vec![Src::Layer(join)])?;
    Ok(())
}

/// Parse a descriptor and initialize parameters per its `init` flag.
pub fn build_model(text: &str, seed: u64) -> Result<ModelGraph> {
    let (mut graph, init) = parse_descriptor(text)?;
    graph.init_params(init, seed);
    Ok(graph)
}

/// Canonical primitive-layer descriptor for a graph: `resblock` shorthand is
/// already expanded, every `from=` is explicit. Reparsing it reproduces the
/// same graph, which is how checkpoints embed the architecture.
pub fn to_descriptor(graph: &ModelGraph) -> String {
    let (c, h, w) = graph.input_shape;
    let mut out = format!("input {c} {h} {w}\n");
    let src_name = |s: &Src| match s {
        Src::Input => unreachable!("only the first layer reads the input"),
        Src::Layer(id) => graph.layer(*id).name.clone(),
    };
    for (id, layer) in graph.layers().iter().enumerate() {
        let from = if id == 0 {
            String::new()
        } else {
            format!(" from={}", src_name(&layer.inputs[0]))
        };
        let name = &layer.name;
        match layer.kind {
            LayerKind::Conv2d {
                out_filters,
                kernel,
                stride,
                padding,
                has_bias,
                ..
            } => {
                out.push_str(&format!(
                    "conv {name} filters={out_filters} kernel={kernel} stride={stride} pad={padding} bias={has_bias}{from}\n"
                ));
            }
            LayerKind::BatchNorm { .. } => out.push_str(&format!("bn {name}{from}\n")),
            LayerKind::Relu => out.push_str(&format!("relu {name}{from}\n")),
            LayerKind::MaxPool { kernel, stride } => {
                out.push_str(&format!("maxpool {name} kernel={kernel} stride={stride}{from}\n"))
            }
            LayerKind::AvgPool { kernel, stride } => {
                out.push_str(&format!("avgpool {name} kernel={kernel} stride={stride}{from}\n"))
            }
            LayerKind::Linear {
                out_features,
                has_bias,
                ..
            } => out.push_str(&format!("linear {name} out={out_features} bias={has_bias}{from}\n")),
            LayerKind::Add => out.push_str(&format!(
                "add {name} from={},{}\n",
                src_name(&layer.inputs[0]),
                src_name(&layer.inputs[1])
            )),
            LayerKind::Flatten => out.push_str(&format!("flatten {name}{from}\n")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY_2CONV: &str = "
input 3 8 8
conv c1 filters=8 kernel=3 pad=1 bias=false
relu r1
conv c2 filters=16 kernel=3 pad=1 bias=false
relu r2
flatten f
linear fc out=10
";

    #[test]
    fn toy_two_conv_net_builds() {
        let (g, init) = parse_descriptor(TOY_2CONV).unwrap();
        assert_eq!(init, Init::Kaiming);
        // conv + conv + linear carry parameters
        let with_params = (0..g.layers().len()).filter(|&i| g.params(i).is_some()).count();
        assert_eq!(with_params, 3);
        // bias-less convs plus weight+bias linear: four parameter tensors
        assert_eq!(g.named_tensors().len(), 4);
        assert_eq!(g.num_classes(), 10);
    }

    #[test]
    fn from_references_and_add_join() {
        let text = "
input 3 8 8
conv c1 filters=4 kernel=3 pad=1 bias=false
relu r1
conv c2 filters=4 kernel=3 pad=1 bias=false
add j from=r1,c2
relu r2
flatten f
linear fc out=2
";
        let (g, _) = parse_descriptor(text).unwrap();
        assert_eq!(g.layer(g.layer_id("j").unwrap()).inputs.len(), 2);
        // both c1 and c2 feed the join; neither is locally prunable
        assert!(g.structurally_prunable().is_empty());
    }

    #[test]
    fn resblock_expands_with_projection_only_when_needed() {
        let text = "
input 3 8 8
conv stem filters=4 kernel=3 pad=1 bias=false
bn stembn
relu stemrelu
resblock b1 filters=4
resblock b2 filters=8 stride=2
avgpool gap kernel=global
flatten f
linear fc out=2
";
        let (g, _) = parse_descriptor(text).unwrap();
        assert!(g.layer_id("b1/proj").is_none(), "identity shortcut expected");
        assert!(g.layer_id("b2/proj").is_some(), "projection shortcut expected");
        // prunable: only the first conv of each block
        let prunable = g.structurally_prunable();
        let names: Vec<_> = prunable.iter().map(|&i| g.layer(i).name.clone()).collect();
        assert_eq!(names, vec!["b1/conv1", "b2/conv1"]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_descriptor("input 3 8 8\nconv c1 kernel=3\n").unwrap_err();
        match err {
            CoreError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
        assert!(parse_descriptor("conv c1 filters=4 kernel=3\n").is_err());
        assert!(parse_descriptor("input 3 8 8\nconv c1 filters=4 kernel=3 bogus=1\n").is_err());
    }

    #[test]
    fn canonical_descriptor_round_trips() {
        let text = "
input 3 8 8
conv stem filters=4 kernel=3 pad=1 bias=false
bn stembn
relu stemrelu
resblock b1 filters=4
resblock b2 filters=8 stride=2
avgpool gap kernel=global
flatten f
linear fc out=2
";
        let (g, _) = parse_descriptor(text).unwrap();
        let canon = to_descriptor(&g);
        let (g2, _) = parse_descriptor(&canon).unwrap();
        assert_eq!(g.layers(), g2.layers());
        assert_eq!(g.input_shape, g2.input_shape);
        assert_eq!(canon, to_descriptor(&g2));
    }

    #[test]
    fn zero_init_flag_is_honored() {
        let text = "input 1 4 4\ninit zero\nconv c filters=2 kernel=3\nflatten f\nlinear fc out=2\n";
        let m = build_model(text, 3).unwrap();
        let w = m.conv_weight(m.layer_id("c").unwrap()).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }
}
