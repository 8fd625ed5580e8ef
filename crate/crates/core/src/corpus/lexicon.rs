//! Closed word-level vocabulary and the compiled template grammar.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Token identifier into a [`Lexicon`].
pub type TokenId = u32;

/// Index of an attribute in the lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttrId(pub u16);

/// Global index of a value in the lexicon (unique across attributes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueId(pub u16);

/// Reserved tokens. They always occupy ids `0..Specials::COUNT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub attr: TokenId,
    pub val: TokenId,
    pub ctx_end: TokenId,
    pub highlight: TokenId,
}

impl Specials {
    pub const COUNT: usize = 7;
    const SURFACES: [&'static str; Self::COUNT] = ["<pad>", "<bos>", "<eos>", "<attr>", "<val>", "<ctx_end>", "<hl>"];

    pub const fn fixed() -> Self {
        Specials { pad: 0, bos: 1, eos: 2, attr: 3, val: 4, ctx_end: 5, highlight: 6 }
    }
}

/// One attribute of the closed schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    /// Surface forms; multi-word values are space separated.
    pub values: Vec<String>,
    /// Present in every data-to-text record.
    #[serde(default)]
    pub required: bool,
}

/// Attribute, value and function-word inventories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub attributes: Vec<AttributeSpec>,
    pub function_words: Vec<String>,
}

/// A clause verbalizing one optional attribute, e.g. `near {near}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseTemplate {
    pub attribute: String,
    pub pattern: String,
}

/// Verbalization templates with `{attribute}` slot markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    /// Opening templates covering every required attribute.
    pub heads: Vec<String>,
    pub clauses: Vec<ClauseTemplate>,
    /// Word inserted before the final clause when there are two or more.
    pub conjunction: String,
    /// Sentence terminator emitted before end-of-sequence.
    pub terminator: String,
}

/// A compiled template: literal tokens interleaved with attribute slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(TokenId),
    Slot(AttrId),
}

#[derive(Debug, Clone)]
pub(crate) struct AttributeDef {
    pub name: String,
    pub token: TokenId,
    pub values: Vec<ValueId>,
    pub required: bool,
    pub clauses: Vec<Vec<Piece>>,
    pub pre_cues: BTreeSet<TokenId>,
    pub post_cues: BTreeSet<TokenId>,
}

#[derive(Debug, Clone)]
pub(crate) struct ValueDef {
    pub surface: String,
    pub tokens: Vec<TokenId>,
    pub attribute: AttrId,
}

/// The corpus vocabulary: token table, schema, and compiled templates.
///
/// Value tokens are exclusive to a single value, which is what lets the
/// fact oracle map any value token back to the fact it would assert.
#[derive(Debug, Clone)]
pub struct Lexicon {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: Specials,
    pub(crate) attributes: Vec<AttributeDef>,
    pub(crate) values: Vec<ValueDef>,
    token_value: Vec<Option<ValueId>>,
    pub(crate) heads: Vec<Vec<Piece>>,
    pub(crate) conjunction: TokenId,
    pub(crate) terminator: TokenId,
}

fn intern(tokens: &mut Vec<String>, index: &mut HashMap<String, TokenId>, word: &str) -> TokenId {
    if let Some(&id) = index.get(word) {
        return id;
    }
    let id = tokens.len() as TokenId;
    tokens.push(word.to_string());
    index.insert(word.to_string(), id);
    id
}

impl Lexicon {
    pub fn new(vocab: &VocabSpec, templates: &TemplateSet) -> Result<Self, CorpusError> {
        if vocab.attributes.is_empty() {
            return Err(CorpusError::InvalidConfig("vocabulary has no attributes".into()));
        }
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for s in Specials::SURFACES {
            intern(&mut tokens, &mut index, s);
        }

        let mut attr_index = HashMap::new();
        let mut attributes = Vec::new();
        for (i, a) in vocab.attributes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(CorpusError::InvalidConfig(format!("attribute `{}` has no values", a.name)));
            }
            if attr_index.insert(a.name.clone(), AttrId(i as u16)).is_some() {
                return Err(CorpusError::InvalidConfig(format!("duplicate attribute `{}`", a.name)));
            }
            let token = intern(&mut tokens, &mut index, &a.name);
            attributes.push(AttributeDef {
                name: a.name.clone(),
                token,
                values: Vec::new(),
                required: a.required,
                clauses: Vec::new(),
                pre_cues: BTreeSet::new(),
                post_cues: BTreeSet::new(),
            });
        }
        for w in &vocab.function_words {
            intern(&mut tokens, &mut index, w);
        }
        let n_shared = tokens.len();

        let mut values = Vec::new();
        let mut value_owner: HashMap<String, ValueId> = HashMap::new();
        for (ai, a) in vocab.attributes.iter().enumerate() {
            for v in &a.values {
                let vid = ValueId(values.len() as u16);
                let mut vt = Vec::new();
                for w in v.split_whitespace() {
                    if let Some(&id) = index.get(w) {
                        if (id as usize) < n_shared {
                            return Err(CorpusError::InvalidConfig(format!(
                                "value word `{w}` collides with a reserved, attribute or function word"
                            )));
                        }
                    }
                    if let Some(owner) = value_owner.get(w) {
                        if *owner != vid {
                            return Err(CorpusError::InvalidConfig(format!(
                                "value word `{w}` is shared by two values"
                            )));
                        }
                    }
                    value_owner.insert(w.to_string(), vid);
                    vt.push(intern(&mut tokens, &mut index, w));
                }
                if vt.is_empty() {
                    return Err(CorpusError::InvalidConfig(format!("empty value for `{}`", a.name)));
                }
                attributes[ai].values.push(vid);
                values.push(ValueDef { surface: v.clone(), tokens: vt, attribute: AttrId(ai as u16) });
            }
        }
        let mut token_value = vec![None; tokens.len()];
        for (i, v) in values.iter().enumerate() {
            for &t in &v.tokens {
                token_value[t as usize] = Some(ValueId(i as u16));
            }
        }

        let compile = |pattern: &str| -> Result<Vec<Piece>, CorpusError> {
            pattern
                .split_whitespace()
                .map(|w| {
                    if let Some(name) = w.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                        attr_index.get(name).map(|&a| Piece::Slot(a)).ok_or_else(|| {
                            CorpusError::InvalidConfig(format!("template slot `{name}` is not an attribute"))
                        })
                    } else {
                        match index.get(w) {
                            Some(&id) if (id as usize) < n_shared && id as usize >= Specials::COUNT => {
                                Ok(Piece::Word(id))
                            }
                            _ => Err(CorpusError::InvalidConfig(format!(
                                "template word `{w}` is not a declared function word"
                            ))),
                        }
                    }
                })
                .collect()
        };

        if templates.heads.is_empty() && templates.clauses.is_empty() {
            return Err(CorpusError::InvalidConfig("empty template set".into()));
        }
        let mut heads = Vec::new();
        for h in &templates.heads {
            let pieces = compile(h)?;
            for (ai, a) in attributes.iter().enumerate() {
                let has = pieces.contains(&Piece::Slot(AttrId(ai as u16)));
                if a.required && !has {
                    return Err(CorpusError::InvalidConfig(format!(
                        "head template `{h}` lacks required slot `{}`",
                        a.name
                    )));
                }
            }
            heads.push(pieces);
        }
        for c in &templates.clauses {
            let &aid = attr_index
                .get(&c.attribute)
                .ok_or_else(|| CorpusError::InvalidConfig(format!("clause for unknown attribute `{}`", c.attribute)))?;
            let pieces = compile(&c.pattern)?;
            let slots: Vec<_> = pieces.iter().filter(|p| matches!(p, Piece::Slot(_))).collect();
            if slots != [&Piece::Slot(aid)] {
                return Err(CorpusError::InvalidConfig(format!(
                    "clause `{}` must contain exactly one slot for `{}`",
                    c.pattern, c.attribute
                )));
            }
            attributes[aid.0 as usize].clauses.push(pieces);
        }
        for pieces in heads.iter().chain(attributes.iter().flat_map(|a| a.clauses.iter())).cloned().collect::<Vec<_>>()
        {
            for (i, p) in pieces.iter().enumerate() {
                if let Piece::Slot(a) = *p {
                    let def = &mut attributes[a.0 as usize];
                    let mut cued = false;
                    if let Some(Piece::Word(w)) = i.checked_sub(1).map(|j| &pieces[j]) {
                        def.pre_cues.insert(*w);
                        cued = true;
                    }
                    if let Some(Piece::Word(w)) = pieces.get(i + 1) {
                        def.post_cues.insert(*w);
                        cued = true;
                    }
                    if !cued {
                        return Err(CorpusError::InvalidConfig(format!(
                            "slot `{}` has no adjacent template word",
                            def.name
                        )));
                    }
                }
            }
        }
        let word = |w: &str| -> Result<TokenId, CorpusError> {
            match index.get(w) {
                Some(&id) if (id as usize) < n_shared => Ok(id),
                _ => Err(CorpusError::InvalidConfig(format!("`{w}` is not a declared function word"))),
            }
        };
        let conjunction = word(&templates.conjunction)?;
        let terminator = word(&templates.terminator)?;

        Ok(Lexicon {
            tokens,
            index,
            specials: Specials::fixed(),
            attributes,
            values,
            token_value,
            heads,
            conjunction,
            terminator,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    pub fn token(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn attribute(&self, name: &str) -> Option<AttrId> {
        self.attributes.iter().position(|a| a.name == name).map(|i| AttrId(i as u16))
    }

    pub fn attribute_name(&self, a: AttrId) -> &str {
        &self.attributes[a.0 as usize].name
    }

    pub fn attribute_token(&self, a: AttrId) -> TokenId {
        self.attributes[a.0 as usize].token
    }

    pub fn is_required(&self, a: AttrId) -> bool {
        self.attributes[a.0 as usize].required
    }

    /// Values of `a`, in declaration order.
    pub fn values_of(&self, a: AttrId) -> &[ValueId] {
        &self.attributes[a.0 as usize].values
    }

    pub fn value(&self, attribute: &str, surface: &str) -> Option<ValueId> {
        let a = self.attribute(attribute)?;
        self.values_of(a).iter().copied().find(|v| self.values[v.0 as usize].surface == surface)
    }

    pub fn value_surface(&self, v: ValueId) -> &str {
        &self.values[v.0 as usize].surface
    }

    pub fn value_tokens(&self, v: ValueId) -> &[TokenId] {
        &self.values[v.0 as usize].tokens
    }

    pub fn value_attribute(&self, v: ValueId) -> AttrId {
        self.values[v.0 as usize].attribute
    }

    /// The value owning token `t`, if `t` is a value token.
    pub fn value_of_token(&self, t: TokenId) -> Option<ValueId> {
        self.token_value.get(t as usize).copied().flatten()
    }

    pub(crate) fn pre_cues(&self, a: AttrId) -> &BTreeSet<TokenId> {
        &self.attributes[a.0 as usize].pre_cues
    }

    pub(crate) fn post_cues(&self, a: AttrId) -> &BTreeSet<TokenId> {
        &self.attributes[a.0 as usize].post_cues
    }

    /// Token ids for whitespace-separated words.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        text.split_whitespace()
            .map(|w| self.token(w).ok_or_else(|| CorpusError::UnknownSymbol(w.to_string())))
            .collect()
    }

    /// Space-joined surface forms; unknown ids render as `<unk:N>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| self.surface(t).map(str::to_string).unwrap_or_else(|| format!("<unk:{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The restaurant-domain vocabulary used by the reference experiment.
pub fn reference_vocab() -> VocabSpec {
    let attr = |name: &str, required: bool, values: &[&str]| AttributeSpec {
        name: name.into(),
        values: values.iter().map(|s| s.to_string()).collect(),
        required,
    };
    VocabSpec {
        attributes: vec![
            attr(
                "name",
                true,
                &[
                    "Vaults",
                    "Wrestlers",
                    "Eagle",
                    "Mill",
                    "Punter",
                    "Cricketers",
                    "Phoenix",
                    "Olive",
                    "Plough",
                    "Waterman",
                    "Zizzi",
                    "Cotto",
                    "Giraffe",
                    "Strada",
                    "Aromi",
                    "Alimentum",
                    "Fitzbillies",
                    "Loch",
                    "Bibimbap",
                    "Wildwood",
                    "Clowns",
                    "Midsummer",
                    "Dumpling",
                    "Browns",
                    "Cocum",
                    "Zuni",
                    "Balti",
                    "Kitchen",
                    "Aspen",
                    "Orchard",
                    "Anchor",
                    "Lantern",
                    "Copper",
                    "Thistle",
                    "Saffron",
                    "Juniper",
                    "Marigold",
                    "Falcon",
                    "Heron",
                    "Bramble",
                    "Pelican",
                    "Harvest",
                    "Crescent",
                    "Magnolia",
                    "Tavern",
                    "Galleon",
                    "Lighthouse",
                    "Willow",
                    "Foxglove",
                    "Beacon",
                    "Meadow",
                    "Sparrow",
                    "Kingfisher",
                    "Driftwood",
                    "Hollybush",
                    "Cinnamon",
                    "Granary",
                    "Oyster",
                    "Nutmeg",
                    "Compass",
                ],
            ),
            attr("type", true, &["restaurant", "pub", "cafe", "bistro", "diner", "bar"]),
            attr(
                "food",
                false,
                &[
                    "italian", "chinese", "indian", "french", "japanese", "english", "mexican", "thai", "greek",
                    "spanish", "korean", "turkish",
                ],
            ),
            attr(
                "area",
                false,
                &["riverside", "city centre", "harbour", "suburbs", "downtown", "old town", "university", "airport"],
            ),
            attr(
                "near",
                false,
                &[
                    "Raja",
                    "Sicilia",
                    "Burger King",
                    "Crowne Plaza",
                    "Avalon",
                    "Rainbow",
                    "Portland",
                    "Ranch",
                    "Bakers",
                    "Yippee",
                    "Sorrento",
                    "Express",
                    "Bridge",
                    "Cathedral",
                    "Market",
                    "Museum",
                    "Station",
                    "Stadium",
                    "Library",
                    "Theatre",
                    "Gallery",
                    "Marina",
                    "Arcade",
                    "Observatory",
                    "Chapel",
                    "Quay",
                    "Aquarium",
                    "Conservatory",
                    "Pavilion",
                    "Mall",
                    "Lido",
                    "Abbey",
                    "Castle",
                    "Windmill",
                    "Brewery",
                    "Tower",
                    "Fountain",
                    "Hospital",
                    "Cinema",
                    "Zoo",
                ],
            ),
            attr("price", false, &["cheap", "affordable", "moderate", "expensive", "luxurious"]),
            attr("rating", false, &["poor", "average", "good", "excellent", "outstanding"]),
            attr(
                "chef",
                false,
                &[
                    "Rossi",
                    "Dubois",
                    "Tanaka",
                    "Okafor",
                    "Novak",
                    "Silva",
                    "Larsen",
                    "Kowalski",
                    "Murphy",
                    "Haddad",
                    "Petrov",
                    "Moreau",
                    "Keller",
                    "Santos",
                    "Nakamura",
                    "Fischer",
                    "Costa",
                    "Walsh",
                    "Ibrahim",
                    "Lindqvist",
                ],
            ),
        ],
        function_words: [
            "is", "a", "venue", "serving", "with", "cuisine", "in", "the", "located", "close", "to", "prices", "price",
            "range", "rated", "an", "and", ".", "run", "by", "chef", "led",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    }
}

pub fn reference_templates() -> TemplateSet {
    let clause = |a: &str, p: &str| ClauseTemplate { attribute: a.into(), pattern: p.into() };
    TemplateSet {
        heads: vec!["{name} is a {type}".into(), "{name} is a {type} venue".into()],
        clauses: vec![
            clause("food", "serving {food} food"),
            clause("food", "with {food} cuisine"),
            clause("area", "in the {area}"),
            clause("area", "located in the {area}"),
            clause("near", "near {near}"),
            clause("near", "close to {near}"),
            clause("price", "with {price} prices"),
            clause("price", "in the {price} price range"),
            clause("rating", "rated {rating}"),
            clause("rating", "with an {rating} rating"),
            clause("chef", "run by chef {chef}"),
            clause("chef", "led by chef {chef}"),
        ],
        conjunction: "and".into(),
        terminator: ".".into(),
    }
}
